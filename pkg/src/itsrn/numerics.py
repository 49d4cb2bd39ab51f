"""Dense numeric kernels shared by the autograd engine, backbone and upsampler.

Tensors are plain :class:`numpy.ndarray` objects, row-major, with images laid
out channel-first (``C x H x W``).  Every kernel here is a pure function of its
inputs.  Brute-force twins used for verification live in the test suite.
"""

from __future__ import annotations

import contextlib
import contextvars
import math

import numpy as np

__all__ = [
    "ShapeError",
    "debug_checks",
    "check_finite",
    "matmul",
    "softmax",
    "layer_norm",
    "conv2d",
    "depthwise_conv2d",
    "activation",
    "ACTIVATIONS",
    "cubic_kernel",
    "resize_weights",
    "bicubic_resize",
    "fft2_magnitude",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_DEBUG = contextvars.ContextVar("itsrn_debug_checks", default=False)


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Assert that every kernel output is finite while the context is active."""
    token = _DEBUG.set(enabled)
    try:
        yield
    finally:
        _DEBUG.reset(token)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if _DEBUG.get() and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what} (shape {x.shape})")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return check_finite(e / np.sum(e, axis=axis, keepdims=True), "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the trailing (channel) axis, then apply ``gamma``/``beta``."""
    if x.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise ShapeError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    out = (x - mu) / np.sqrt(var + eps) * gamma + beta
    return check_finite(out, "layer_norm")


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded ``k x k`` neighbourhoods: ``(C, H, W) -> (C, H, W, k, k)``."""
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    return np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Same-padded 2-D cross-correlation.

    Parameters
    ----------
    x : array, shape (C_in, H, W)
    w : array, shape (C_out, C_in, k, k), ``k`` odd
    b : array, shape (C_out,), optional

    Returns
    -------
    array, shape (C_out, H, W)
    """
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    k = w.shape[-1]
    if w.shape[-2] != k or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {w.shape[-2:]}")
    if k == 1:
        out = np.tensordot(w[:, :, 0, 0], x, axes=(1, 0))
    else:
        cols = _patches(x, k)
        out = np.tensordot(w, cols, axes=([1, 2, 3], [0, 3, 4]))
    if b is not None:
        out = out + b[:, None, None]
    return check_finite(out, "conv2d")


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Channel-wise same-padded cross-correlation; ``w`` has shape (C, k, k)."""
    if x.ndim != 3 or w.ndim != 3 or w.shape[0] != x.shape[0]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} incompatible with weight {w.shape}")
    k = w.shape[-1]
    if w.shape[-2] != k or k % 2 == 0:
        raise ShapeError(f"depthwise_conv2d: kernel must be square with odd size, got {w.shape[-2:]}")
    cols = _patches(x, k)
    # per channel, the same contraction conv2d performs, so C=1 agrees bit for bit
    out = np.stack([np.tensordot(w[c:c + 1, None], cols[c:c + 1], axes=([1, 2, 3], [0, 3, 4]))[0]
                    for c in range(x.shape[0])])
    if b is not None:
        out = out + b[:, None, None]
    return check_finite(out, "depthwise_conv2d")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, 0),
    "sigmoid": _sigmoid,
    "tanh": np.tanh,
    "sin": np.sin,
}


def activation(x: np.ndarray, fn: str) -> np.ndarray:
    try:
        f = ACTIVATIONS[fn]
    except KeyError:
        raise ValueError(f"unknown activation {fn!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return check_finite(f(x), fn)


def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    """Interpolation matrix of shape (n_out, n_in) for one axis.

    Output sample ``i`` sits at input position ``(i + 0.5) * n_in / n_out - 0.5``.
    When downscaling the kernel is stretched by the scale factor (antialiasing).
    Out-of-range taps are clamped to the edge and each row is normalized.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize extents must be >= 1, got {n_in} -> {n_out}")
    scale = n_out / n_in
    support = 2.0 if scale >= 1 else 2.0 / scale
    stretch = 1.0 if scale >= 1 else scale
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    lo = np.floor(centers - support).astype(np.int64) + 1
    taps = int(math.ceil(2 * support)) + 1
    idx = lo[:, None] + np.arange(taps)[None, :]
    wts = cubic_kernel((idx - centers[:, None]) * stretch, a)
    wts = wts / wts.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), np.clip(idx, 0, n_in - 1).ravel()), wts.ravel())
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resize of a ``(C, H, W)`` image."""
    if img.ndim != 3:
        raise ShapeError(f"bicubic_resize expects (C, H, W), got {img.shape}")
    c, h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    wh = resize_weights(h, out_h).astype(img.dtype, copy=False)
    ww = resize_weights(w, out_w).astype(img.dtype, copy=False)
    out = np.einsum("oh,chw,pw->cop", wh, img, ww, optimize=True)
    return check_finite(out, "bicubic_resize")


def fft2_magnitude(x: np.ndarray) -> np.ndarray:
    """Magnitude of the 2-D DFT with the zero frequency moved to the centre."""
    if x.ndim != 2:
        raise ShapeError(f"fft2_magnitude expects (H, W), got {x.shape}")
    return np.abs(np.fft.fftshift(np.fft.fft2(x)))
