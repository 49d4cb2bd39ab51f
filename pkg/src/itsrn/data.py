"""Image I/O, synthetic screen content, LR/HR pair synthesis and batch sampling."""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import coords as co
from .numerics import bicubic_resize


class ImageFormatError(ValueError):
    pass


class TooSmallError(ValueError):
    pass


# -- PPM -----------------------------------------------------------------------

def _header_tokens(buf: bytes, count: int):
    """Parse ``count`` whitespace separated header tokens, skipping ``#`` comments."""
    tokens, i, n = [], 0, len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ImageFormatError("truncated PPM header")
        tokens.append(buf[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def load_ppm(path) -> np.ndarray:
    """Read a binary (P6, maxval 255) PPM as a float64 ``(3, H, W)`` array in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (magic {raw[:2]!r})")
    (magic, w, h, maxval), start = _header_tokens(raw, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    need = w * h * 3
    data = raw[start:start + need]
    if len(data) < need:
        raise ImageFormatError(f"{path}: truncated raster ({len(data)} of {need} bytes)")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return np.transpose(arr, (2, 0, 1)).astype(np.float64) / 255.0


def to_u8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8-bit, ``(C, H, W) -> (H, W, C)``."""
    v = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5)
    return np.transpose(v.astype(np.uint8), (1, 2, 0))


def save_ppm(img: np.ndarray, path) -> None:
    if img.ndim != 3 or img.shape[0] != 3:
        raise ImageFormatError(f"expected a (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(to_u8(img).tobytes())


def load_dir(root, manifest=None) -> list[np.ndarray]:
    """Load every ``.ppm`` in ``root`` (sorted), or only those listed in ``manifest``."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    if manifest is not None:
        names = [ln.strip() for ln in Path(manifest).read_text().splitlines() if ln.strip()]
        files = [root / n for n in names]
    else:
        files = sorted(root.glob("*.ppm"))
    return [load_ppm(f) for f in files]


# -- synthetic screen content ------------------------------------------------------

# 5x7 bitmaps for a handful of glyph shapes; enough to get text-like strokes
_GLYPHS = [
    ["01110", "10001", "10001", "11111", "10001", "10001", "10001"],
    ["11110", "10001", "11110", "10001", "10001", "10001", "11110"],
    ["01111", "10000", "10000", "10000", "10000", "10000", "01111"],
    ["11111", "00100", "00100", "00100", "00100", "00100", "00100"],
    ["10001", "11011", "10101", "10001", "10001", "10001", "10001"],
    ["11111", "10000", "11110", "10000", "10000", "10000", "11111"],
    ["10001", "10001", "10001", "10001", "10001", "01010", "00100"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
]
_GLYPH_MASKS = [np.array([[c == "1" for c in row] for row in g]) for g in _GLYPHS]


def _color(rng, dark=None):
    if dark is None:
        return rng.integers(0, 256, size=3) / 255.0
    lo, hi = (0, 80) if dark else (170, 256)
    return rng.integers(lo, hi, size=3) / 255.0


def synth_sci(seed: int, h: int = 64, w: int = 64) -> np.ndarray:
    """Deterministic synthetic screen-content image, ``(3, h, w)`` on the 8-bit grid.

    Layers: flat background, a smooth gradient panel, solid rectangles, a text
    panel of bitmap glyphs, and 1-pixel rules.  At least one black 1-pixel rule
    on white is always present.
    """
    if h < 16 or w < 16:
        raise TooSmallError(f"synthetic images need h, w >= 16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    img = np.empty((3, h, w))
    img[:] = _color(rng, dark=bool(rng.integers(2)))[:, None, None]

    # smooth gradient panel
    gh, gw = rng.integers(h // 4, h // 2 + 1), rng.integers(w // 4, w // 2 + 1)
    gy, gx = rng.integers(0, h - gh + 1), rng.integers(0, w - gw + 1)
    c0, c1 = _color(rng), _color(rng)
    t = np.linspace(0.0, 1.0, gw)[None, None, :] if rng.integers(2) else np.linspace(0.0, 1.0, gh)[None, :, None]
    grad = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    img[:, gy:gy + gh, gx:gx + gw] = np.broadcast_to(grad, (3, gh, gw))

    # solid rectangles
    for _ in range(rng.integers(2, 5)):
        rh, rw = rng.integers(3, h // 3 + 1), rng.integers(3, w // 3 + 1)
        ry, rx = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
        img[:, ry:ry + rh, rx:rx + rw] = _color(rng)[:, None, None]

    # text panel
    ph, pw = min(h, 2 * 9 + 2), min(w, rng.integers(w // 2, w + 1))
    py, px = rng.integers(0, h - ph + 1), rng.integers(0, w - pw + 1)
    dark_text = bool(rng.integers(2))
    img[:, py:py + ph, px:px + pw] = _color(rng, dark=not dark_text)[:, None, None]
    ink = _color(rng, dark=dark_text)
    for line in range((ph - 2) // 9):
        x = px + 1
        while x + 5 <= px + pw - 1:
            g = _GLYPH_MASKS[rng.integers(len(_GLYPH_MASKS))]
            y = py + 1 + 9 * line
            region = img[:, y:y + 7, x:x + 5]
            region[:, g] = ink[:, None]
            x += 6

    # random 1-px rules
    for _ in range(rng.integers(1, 4)):
        c = _color(rng)
        if rng.integers(2):
            y = rng.integers(0, h)
            x0, x1 = sorted(rng.integers(0, w, size=2))
            img[:, y, x0:x1 + 1] = c[:, None]
        else:
            x = rng.integers(0, w)
            y0, y1 = sorted(rng.integers(0, h, size=2))
            img[:, y0:y1 + 1, x] = c[:, None]

    # guaranteed full-contrast rule: black line through a white strip
    sh, sw = 5, rng.integers(w // 4, w // 2 + 1)
    sy, sx = rng.integers(0, h - sh + 1), rng.integers(0, w - sw + 1)
    img[:, sy:sy + sh, sx:sx + sw] = 1.0
    img[:, sy + 2, sx:sx + sw] = 0.0
    return np.round(img * 255.0) / 255.0


def has_thin_rule(img: np.ndarray) -> bool:
    """True if some pixel differs by exactly 1.0 from both neighbours along an axis."""
    v = img
    vert = (np.abs(v[:, 1:-1, :] - v[:, :-2, :]) == 1.0) & (np.abs(v[:, 1:-1, :] - v[:, 2:, :]) == 1.0)
    horz = (np.abs(v[:, :, 1:-1] - v[:, :, :-2]) == 1.0) & (np.abs(v[:, :, 1:-1] - v[:, :, 2:]) == 1.0)
    return bool(vert.all(axis=0).any() or horz.all(axis=0).any())


# -- pairs and batches ----------------------------------------------------------------

def lr_extent(n_hr: int, r: float) -> int:
    n = int(np.floor(n_hr / r + 1e-9))
    while n > 0 and co.output_shape(n, n, r)[0] > n_hr:
        n -= 1
    return n


def make_pair(hr: np.ndarray, r: float, min_lr: int = 8):
    """Bicubic LR counterpart of ``hr`` at scale ``r``.

    The LR extent is the largest whose upsampled size fits inside ``hr``; ``hr``
    is centre-cropped to exactly that upsampled size.  Returns ``(lr, hr)``.
    """
    if not r >= 1:
        raise ValueError(f"scale must be >= 1, got {r}")
    _, H, W = hr.shape
    h, w = lr_extent(H, r), lr_extent(W, r)
    if min(h, w) < min_lr:
        raise TooSmallError(f"LR size {h}x{w} below minimum {min_lr} for {H}x{W} at x{r}")
    hh, ww = co.output_shape(h, w, r)
    y0, x0 = (H - hh) // 2, (W - ww) // 2
    crop = hr[:, y0:y0 + hh, x0:x0 + ww]
    return bicubic_resize(crop, h, w), crop


@dataclass
class TrainBatch:
    lr: np.ndarray          # (b, 3, h, w)
    scales: np.ndarray      # (b,)
    gt: np.ndarray          # (b, h*w, 3)
    coords: np.ndarray      # (b, h*w, 2), normalized (y, x) inside the HR crop
    cells: np.ndarray       # (b, 2), HR cell size of each crop
    crop_shapes: np.ndarray  # (b, 2)
    indices: np.ndarray     # (b, h*w, 2) integer pixel positions in the crop


def flip_rotate(patch: np.ndarray, rng) -> np.ndarray:
    """Random flips and (for square patches) transposition, each with probability 0.5."""
    if rng.random() < 0.5:
        patch = patch[:, :, ::-1]
    if rng.random() < 0.5:
        patch = patch[:, ::-1, :]
    if rng.random() < 0.5 and patch.shape[1] == patch.shape[2]:
        patch = np.transpose(patch, (0, 2, 1))
    return np.ascontiguousarray(patch)


def make_batch(pool, b: int, h: int, w: int, r_range=(1.0, 4.0), rng=None,
               augment: bool = False) -> TrainBatch:
    """Sample ``b`` LR patches of ``h x w`` with per-sample scales ``r ~ U(r_range)``.

    Each sample crops a ``floor(r h) x floor(r w)`` HR patch, bicubic-downsamples
    it to ``h x w`` and draws ``h * w`` distinct GT pixels from the crop.
    """
    if not pool:
        raise ValueError("image pool is empty")
    rng = np.random.default_rng(rng)
    lo, hi = r_range
    lrs, scales, gts, cds, cells, shapes, idxs = [], [], [], [], [], [], []
    for _ in range(b):
        img = pool[int(rng.integers(len(pool)))]
        r = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        hh, ww = co.output_shape(h, w, r)
        _, H, W = img.shape
        if hh > H or ww > W:
            raise TooSmallError(f"image {H}x{W} too small for a {hh}x{ww} crop at x{r:.3f}")
        y0, x0 = int(rng.integers(0, H - hh + 1)), int(rng.integers(0, W - ww + 1))
        crop = img[:, y0:y0 + hh, x0:x0 + ww]
        if augment:
            crop = flip_rotate(crop, rng)
        pick = rng.choice(hh * ww, size=h * w, replace=False)
        iy, ix = np.divmod(pick, ww)
        lrs.append(bicubic_resize(crop, h, w))
        scales.append(r)
        gts.append(crop[:, iy, ix].T)
        cds.append(np.stack([co.center_coords(hh)[iy], co.center_coords(ww)[ix]], axis=1))
        cells.append((2.0 / hh, 2.0 / ww))
        shapes.append((hh, ww))
        idxs.append(np.stack([iy, ix], axis=1))
    return TrainBatch(np.stack(lrs), np.array(scales), np.stack(gts), np.stack(cds),
                      np.array(cells), np.array(shapes), np.stack(idxs))


class BatchProducer:
    """Background thread filling a bounded queue; ``put`` blocks when it is full.

    ``make(step)`` must be a pure function of the step so the stream does not
    depend on thread timing.
    """

    def __init__(self, make, start: int, stop: int, maxsize: int = 4):
        self._q: queue.Queue = queue.Queue(maxsize=maxsize)
        self._make = make
        self._thread = threading.Thread(target=self._run, args=(start, stop), daemon=True)
        self._thread.start()

    def _run(self, start, stop):
        for step in range(start, stop):
            try:
                item = (step, self._make(step), None)
            except Exception as e:  # surfaced to the consumer
                self._q.put((step, None, e))
                return
            self._q.put(item)

    def get(self):
        step, batch, err = self._q.get()
        if err is not None:
            raise err
        return step, batch
