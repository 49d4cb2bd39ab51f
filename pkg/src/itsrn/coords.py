"""Continuous coordinates on [-1, 1] with the cell-centre convention.

Pixel ``i`` of an ``n``-cell axis sits at ``-1 + (2i + 1) / n``.  Offsets between
an HR query and an LR cell centre are measured in LR half-cells (multiplied
by ``n_lr``), so a query's offset to its nearest LR centre stays within
[-1, 1] whatever the scale factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CellSize:
    """Extent of one HR cell in normalized coordinates, ``(2/H_hr, 2/W_hr)``."""

    s_h: float
    s_w: float

    @classmethod
    def for_shape(cls, h_hr: int, w_hr: int) -> "CellSize":
        return cls(2.0 / h_hr, 2.0 / w_hr)

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.array([self.s_h, self.s_w], dtype=dtype)


@dataclass
class OffsetField:
    offsets: np.ndarray   # (H_hr, W_hr, 2), LR half-cell units
    nn_index: np.ndarray  # (H_hr, W_hr, 2) int, nearest LR cell per query
    cell: CellSize


@dataclass
class EnsembleWeights:
    """Bilinear weights and LR neighbour indices for each query.

    ``weights`` has shape ``(4, *query_shape)`` ordered (00, 01, 10, 11) and
    ``rows``/``cols`` give the matching LR indices.  Offsets from each query to
    each of its four neighbours, in LR half-cell units, are in ``offsets``
    (shape ``(4, *query_shape, 2)``).
    """

    weights: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    offsets: np.ndarray

    @property
    def w00(self): return self.weights[0]

    @property
    def w01(self): return self.weights[1]

    @property
    def w10(self): return self.weights[2]

    @property
    def w11(self): return self.weights[3]


def center_coords(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"axis length must be >= 1, got {n}")
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def output_shape(h_lr: int, w_lr: int, r: float) -> tuple[int, int]:
    if not r >= 1:
        raise ValueError(f"scale factor must be >= 1 (upsampling only), got {r}")
    # the small tolerance keeps e.g. 180 * 2.1 = 377.99999... at 378
    return int(math.floor(r * h_lr + 1e-9)), int(math.floor(r * w_lr + 1e-9))


def grid_coords(h: int, w: int) -> np.ndarray:
    """Cell centres of an ``h x w`` grid as an ``(h, w, 2)`` array of (y, x)."""
    ys, xs = center_coords(h), center_coords(w)
    return np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1)


def _to_index_space(coord: np.ndarray, n: int) -> np.ndarray:
    """Map normalized coordinates to continuous pixel-index units (centre of pixel i is i)."""
    return (coord + 1.0) * n / 2.0 - 0.5


def nearest_index(coord: np.ndarray, n: int) -> np.ndarray:
    """Nearest LR cell for each coordinate; ties go to the smaller index."""
    u = _to_index_space(coord, n)
    return np.clip(np.ceil(u - 0.5), 0, n - 1).astype(np.int64)


def offsets_to(coord: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    return (coord - center_coords(n)[index]) * n


def query_offsets(coords: np.ndarray, h_lr: int, w_lr: int):
    """Nearest-neighbour projection of arbitrary query coordinates ``(..., 2)``."""
    iy = nearest_index(coords[..., 0], h_lr)
    ix = nearest_index(coords[..., 1], w_lr)
    off = np.stack([offsets_to(coords[..., 0], iy, h_lr),
                    offsets_to(coords[..., 1], ix, w_lr)], axis=-1)
    return off, np.stack([iy, ix], axis=-1)


def project_queries(h_lr: int, w_lr: int, h_hr: int, w_hr: int) -> tuple[OffsetField, CellSize]:
    _check_extents(h_lr, w_lr, h_hr, w_hr)
    off, nn = query_offsets(grid_coords(h_hr, w_hr), h_lr, w_lr)
    cell = CellSize.for_shape(h_hr, w_hr)
    return OffsetField(off, nn, cell), cell


def _axis_neighbors(coord: np.ndarray, n: int):
    """Lower/upper LR neighbours and their linear weights along one axis."""
    u = _to_index_space(coord, n)
    i0 = np.floor(u)
    t = u - i0
    i0 = i0.astype(np.int64)
    lo, hi = np.clip(i0, 0, n - 1), np.clip(i0 + 1, 0, n - 1)
    w_lo, w_hi = 1.0 - t, t
    # clamped at a border: both taps hit the same cell, fold the weight onto one
    same = lo == hi
    w_lo = np.where(same, 1.0, w_lo)
    w_hi = np.where(same, 0.0, w_hi)
    return (lo, hi), (w_lo, w_hi)


def query_ensemble(coords: np.ndarray, h_lr: int, w_lr: int) -> EnsembleWeights:
    """Local-ensemble stencil for arbitrary query coordinates ``(..., 2)``."""
    (r0, r1), (wr0, wr1) = _axis_neighbors(coords[..., 0], h_lr)
    (c0, c1), (wc0, wc1) = _axis_neighbors(coords[..., 1], w_lr)
    rows = np.stack([r0, r0, r1, r1])
    cols = np.stack([c0, c1, c0, c1])
    weights = np.stack([wr0 * wc0, wr0 * wc1, wr1 * wc0, wr1 * wc1])
    offsets = np.stack([offsets_to(coords[None, ..., 0], rows, h_lr),
                        offsets_to(coords[None, ..., 1], cols, w_lr)], axis=-1)
    return EnsembleWeights(weights, rows, cols, offsets)


def ensemble_weights(h_lr: int, w_lr: int, h_hr: int, w_hr: int) -> EnsembleWeights:
    _check_extents(h_lr, w_lr, h_hr, w_hr)
    return query_ensemble(grid_coords(h_hr, w_hr), h_lr, w_lr)


def _check_extents(h_lr, w_lr, h_hr, w_hr):
    if min(h_lr, w_lr) < 1 or h_hr < h_lr or w_hr < w_lr:
        raise ValueError(f"need HR extents >= LR extents >= 1, got LR {h_lr}x{w_lr}, HR {h_hr}x{w_hr}")
