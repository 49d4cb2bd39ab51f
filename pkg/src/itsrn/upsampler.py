"""Implicit transformer upsampler.

Each HR query is turned into a pixel by modulating the value feature of an LR
cell with weights computed from the query offset (Q), the cell's key (K) and
the target scale (S), then decoding with a four-layer MLP.  Predictions made
relative to the four surrounding LR cells are blended with bilinear weights.

Three ablation decoders share the same output contract:

* ``liif_concat``   - MLP over ``concat(Q, unfold3x3(V))``
* ``bilinear_only`` - MLP over bilinearly interpolated V, no coordinates
* ``itsrn_offset``  - MLP over ``H(offset) * V`` with ``H`` a small MLP
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import coords as co
from . import grad as G
from .grad import Node

VARIANTS = ("modulation", "liif_concat", "bilinear_only", "itsrn_offset")
REWEIGHTS = ("sin", "tanh", "sigmoid", "softmax")

# queries decoded per chunk at inference; bounds peak memory on large outputs
CHUNK = 1 << 15


@dataclass(frozen=True)
class UpsamplerConfig:
    c_feat: int = 64
    c_up: int = 256
    hidden: int = 256
    variant: str = "modulation"
    reweight: str = "sin"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown upsampler variant {self.variant!r}; expected one of {VARIANTS}")
        if self.reweight not in REWEIGHTS:
            raise ValueError(f"unknown reweight function {self.reweight!r}; expected one of {REWEIGHTS}")
        if self.c_up <= 0 or self.hidden <= 0 or self.c_feat <= 0:
            raise ValueError("upsampler widths must be positive")


def param_shapes(cfg: UpsamplerConfig, prefix: str = "up") -> dict[str, tuple]:
    c, h = cfg.c_up, cfg.hidden
    shapes = {
        f"{prefix}.q.w": (c, 2), f"{prefix}.q.b": (c,),
        f"{prefix}.k.w": (c, cfg.c_feat), f"{prefix}.k.b": (c,),
        f"{prefix}.v.w": (c, cfg.c_feat), f"{prefix}.v.b": (c,),
        f"{prefix}.s.w": (c, 2), f"{prefix}.s.b": (c,),
    }
    phi_in = c + 9 * c if cfg.variant == "liif_concat" else c
    dims = [phi_in, h, h, h, 3]
    for i in range(4):
        shapes[f"{prefix}.phi.{i}.w"] = (dims[i + 1], dims[i])
        shapes[f"{prefix}.phi.{i}.b"] = (dims[i + 1],)
    if cfg.variant == "itsrn_offset":
        shapes[f"{prefix}.h.0.w"], shapes[f"{prefix}.h.0.b"] = (c, 2), (c,)
        shapes[f"{prefix}.h.1.w"], shapes[f"{prefix}.h.1.b"] = (c, c), (c,)
    return shapes


def _lin(x: Node, P: dict[str, Node], name: str) -> Node:
    return G.linear(x, P[name + ".w"], P[name + ".b"])


def lr_tokens(feats: Node) -> Node:
    """``(C, H, W)`` feature map to ``(H*W, C)`` tokens."""
    c, h, w = feats.shape
    return G.reshape(G.transpose(feats, (1, 2, 0)), (h * w, c))


def project_qkv(offsets: np.ndarray, flat_index: np.ndarray, feats: Node,
                P: dict[str, Node], prefix: str = "up"):
    """Q from the query offsets, K and V gathered from the LR cell each query maps to.

    ``offsets`` is ``(n, 2)``; ``flat_index`` holds row-major LR cell indices.
    K and V are projected on the LR grid first and then gathered, which is the
    same as projecting the gathered features.
    """
    tok = lr_tokens(feats)
    q = _lin(tok.tape.constant(offsets.astype(tok.value.dtype, copy=False)), P, f"{prefix}.q")
    k = G.take(_lin(tok, P, f"{prefix}.k"), flat_index, axis=0)
    v = G.take(_lin(tok, P, f"{prefix}.v"), flat_index, axis=0)
    return q, k, v


def reweight(x: Node, fn: str) -> Node:
    if fn == "softmax":
        return G.softmax(x, axis=-1)
    if fn not in REWEIGHTS:
        raise ValueError(f"unknown reweight function {fn!r}")
    return G.activation(x, fn)


def modulate(q: Node, k: Node, v: Node, cell, P: dict[str, Node],
             fn: str = "sin", prefix: str = "up") -> Node:
    """``sigma(K * Q + W_s S) * V``; ``cell`` is ``(2,)`` or per-query ``(n, 2)``."""
    s = q.tape.constant(np.asarray(cell, dtype=q.value.dtype))
    pre = G.add(G.mul(k, q), _lin(s, P, f"{prefix}.s"))
    return G.mul(reweight(pre, fn), v)


def render(vp: Node, P: dict[str, Node], prefix: str = "up") -> Node:
    x = vp
    for i in range(4):
        x = _lin(x, P, f"{prefix}.phi.{i}")
        if i < 3:
            x = G.activation(x, "relu")
    return x


def unfold3x3(tok: Node, h: int, w: int) -> Node:
    """Concatenate each token with its 8 neighbours (zero outside the grid)."""
    c = tok.shape[1]
    padded = G.concat([tok, tok.tape.constant(np.zeros((1, c), dtype=tok.value.dtype))], axis=0)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    idx = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            y, x = ys + dy, xs + dx
            inside = (y >= 0) & (y < h) & (x >= 0) & (x < w)
            idx.append(np.where(inside, y * w + x, h * w).ravel())
    gathered = G.take(padded, np.stack(idx, axis=1), axis=0)  # (hw, 9, c)
    return G.reshape(gathered, (h * w, 9 * c))


def _decode(feats: Node, offsets, flat_index, cell, P, cfg: UpsamplerConfig, prefix) -> Node:
    """Per-neighbour RGB prediction for the ensemble-based variants."""
    if cfg.variant == "modulation":
        q, k, v = project_qkv(offsets, flat_index, feats, P, prefix)
        return render(modulate(q, k, v, cell, P, cfg.reweight, prefix), P, prefix)
    tok = lr_tokens(feats)
    dtype = tok.value.dtype
    if cfg.variant == "liif_concat":
        _, h, w = feats.shape
        q = _lin(tok.tape.constant(offsets.astype(dtype, copy=False)), P, f"{prefix}.q")
        v = G.take(unfold3x3(_lin(tok, P, f"{prefix}.v"), h, w), flat_index, axis=0)
        return render(G.concat([q, v], axis=-1), P, prefix)
    # itsrn_offset
    off = tok.tape.constant(offsets.astype(dtype, copy=False))
    hw = _lin(G.activation(_lin(off, P, f"{prefix}.h.0"), "relu"), P, f"{prefix}.h.1")
    v = G.take(_lin(tok, P, f"{prefix}.v"), flat_index, axis=0)
    return render(G.mul(hw, v), P, prefix)


def query_rgb(feats: Node, coords: np.ndarray, cell, P: dict[str, Node],
              cfg: UpsamplerConfig, prefix: str = "up") -> Node:
    """RGB at arbitrary normalized query coordinates ``(n, 2)``; returns ``(n, 3)``.

    ``cell`` is the HR cell size, either shared ``(2,)`` or per query ``(n, 2)``.
    """
    _, h, w = feats.shape
    n = coords.shape[0]
    ens = co.query_ensemble(coords, h, w)
    dtype = feats.value.dtype
    weights = ens.weights.astype(dtype)[..., None]  # (4, n, 1)
    flat = (ens.rows * w + ens.cols).reshape(-1)
    if cfg.variant == "bilinear_only":
        v = G.take(_lin(lr_tokens(feats), P, f"{prefix}.v"), flat, axis=0)
        v = G.sum_(G.mul(G.reshape(v, (4, n, cfg.c_up)), weights), axis=0)
        return render(v, P, prefix)
    cell = np.asarray(cell, dtype=dtype)
    if cell.ndim == 2:
        cell = np.tile(cell, (4, 1))
    preds = _decode(feats, ens.offsets.reshape(-1, 2), flat, cell, P, cfg, prefix)
    return G.sum_(G.mul(G.reshape(preds, (4, n, 3)), weights), axis=0)


def upsample(feats: Node, h_hr: int, w_hr: int, P: dict[str, Node],
             cfg: UpsamplerConfig, prefix: str = "up") -> Node:
    """Decode a full ``(3, h_hr, w_hr)`` image from an LR feature map."""
    _, h, w = feats.shape
    co._check_extents(h, w, h_hr, w_hr)
    coords = co.grid_coords(h_hr, w_hr).reshape(-1, 2)
    cell = co.CellSize.for_shape(h_hr, w_hr).as_array()
    tape = feats.tape
    if tape.record or coords.shape[0] <= CHUNK:
        rgb = query_rgb(feats, coords, cell, P, cfg, prefix)
        return G.reshape(G.transpose(rgb, (1, 0)), (3, h_hr, w_hr))
    parts = [query_rgb(feats, coords[i:i + CHUNK], cell, P, cfg, prefix).value
             for i in range(0, coords.shape[0], CHUNK)]
    rgb = np.concatenate(parts, axis=0)
    return tape.constant(np.ascontiguousarray(rgb.T).reshape(3, h_hr, w_hr))


def upsample_variant(feats: Node, h_hr: int, w_hr: int, P: dict[str, Node],
                     cfg: UpsamplerConfig, prefix: str = "up") -> Node:
    if cfg.variant == "modulation":
        raise ValueError("upsample_variant covers the ablation decoders; use upsample for 'modulation'")
    return upsample(feats, h_hr, w_hr, P, cfg, prefix)
