"""Feature extraction backbone: stages of single-branch and dual-branch blocks.

A dual-branch block (DBB) runs shifted-window multi-head attention and a
depth-wise convolution block on the un-partitioned value map in parallel, sums
them, and follows with an FFN.  A single-branch block (SBB) keeps only a plain
convolution block.  Blocks operate on ``(C, H, W)`` maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import grad as G
from .grad import Node, Tape

BRANCH_MODES = ("parallel", "sequential", "attention_only", "conv_only", "conv_on_input")
MASK_VALUE = -1e9


@dataclass(frozen=True)
class StageConfig:
    blocks: int
    dbb_ratio: float
    channels: int

    @property
    def n_dbb(self) -> int:
        # round half up; python's round() would send 0.5 to 0
        return int(math.floor(self.dbb_ratio * self.blocks + 0.5))

    @property
    def n_sbb(self) -> int:
        return self.blocks - self.n_dbb

    def kinds(self) -> list[str]:
        return ["sbb"] * self.n_sbb + ["dbb"] * self.n_dbb


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple[StageConfig, ...] = field(default_factory=lambda: (
        StageConfig(2, 0.0, 64), StageConfig(8, 0.25, 64),
        StageConfig(8, 0.25, 128), StageConfig(16, 0.75, 192)))
    feat_channels: int = 64
    in_channels: int = 3
    window: int = 16
    heads: int = 8
    ffn_ratio: int = 2
    ca_reduction: int = 4
    branch_mode: str = "parallel"
    global_residual: bool = True

    def __post_init__(self):
        if self.branch_mode not in BRANCH_MODES:
            raise ValueError(f"unknown branch mode {self.branch_mode!r}; expected one of {BRANCH_MODES}")
        for st in self.stages:
            if st.n_dbb and st.channels % self.heads:
                raise ValueError(f"channels {st.channels} not divisible by {self.heads} heads")
            if st.channels // self.ca_reduction < 1:
                raise ValueError(f"channel attention reduction {self.ca_reduction} too large for {st.channels} channels")


# -- parameters ------------------------------------------------------------------

def ca_shapes(p: str, c: int, rho: int) -> dict[str, tuple]:
    r = c // rho
    return {f"{p}.down.w": (r, c), f"{p}.down.b": (r,), f"{p}.up.w": (c, r), f"{p}.up.b": (c,)}


def attn_shapes(p: str, c: int, m: int, heads: int) -> dict[str, tuple]:
    out = {f"{p}.bias": ((2 * m - 1) ** 2, heads)}
    for n in "qkvo":
        out[f"{p}.{n}.w"], out[f"{p}.{n}.b"] = (c, c), (c,)
    return out


def block_shapes(p: str, kind: str, c: int, cfg: BackboneConfig) -> dict[str, tuple]:
    e = cfg.ffn_ratio * c
    out = {
        f"{p}.ln1.g": (c,), f"{p}.ln1.b": (c,), f"{p}.ln2.g": (c,), f"{p}.ln2.b": (c,),
        f"{p}.post.w": (c, c), f"{p}.post.b": (c,),
        f"{p}.ffn.0.w": (e, c), f"{p}.ffn.0.b": (e,), f"{p}.ffn.1.w": (c, e), f"{p}.ffn.1.b": (c,),
    }
    if kind == "dbb":
        out.update(attn_shapes(f"{p}.attn", c, cfg.window, cfg.heads))
        out.update({f"{p}.dw.w": (c, 5, 5), f"{p}.dw.b": (c,), f"{p}.pw.w": (c, c, 1, 1), f"{p}.pw.b": (c,)})
    else:
        out.update({f"{p}.c1.w": (c, c, 3, 3), f"{p}.c1.b": (c,), f"{p}.c2.w": (c, c, 3, 3), f"{p}.c2.b": (c,)})
    out.update(ca_shapes(f"{p}.ca", c, cfg.ca_reduction))
    return out


def param_shapes(cfg: BackboneConfig, prefix: str = "bb") -> dict[str, tuple]:
    f = cfg.feat_channels
    if cfg.stages and cfg.stages[0].channels != f:
        raise ValueError(f"first stage width {cfg.stages[0].channels} must equal feature width {f}")
    shapes = {f"{prefix}.shallow.w": (f, cfg.in_channels, 3, 3), f"{prefix}.shallow.b": (f,)}
    for i, st in enumerate(cfg.stages):
        for j, kind in enumerate(st.kinds()):
            shapes.update(block_shapes(f"{prefix}.s{i}.b{j}", kind, st.channels, cfg))
        nxt = cfg.stages[i + 1].channels if i + 1 < len(cfg.stages) else f
        shapes[f"{prefix}.s{i}.conv.w"] = (nxt, st.channels, 3, 3)
        shapes[f"{prefix}.s{i}.conv.b"] = (nxt,)
    shapes[f"{prefix}.final.w"] = (f, f, 3, 3)
    shapes[f"{prefix}.final.b"] = (f,)
    return shapes


# -- layout helpers ----------------------------------------------------------------

def to_hwc(x: Node) -> Node:
    return G.transpose(x, (1, 2, 0))


def to_chw(x: Node) -> Node:
    return G.transpose(x, (2, 0, 1))


def padded_extent(n: int, m: int) -> int:
    return -(-n // m) * m


def reflect_index(n: int, target: int) -> np.ndarray:
    return np.pad(np.arange(n), (0, target - n), mode="reflect")


def pad_reflect(t: Node, hp: int, wp: int) -> Node:
    """Reflection-pad an ``(H, W, C)`` map at the bottom/right to ``(hp, wp)``."""
    h, w, _ = t.shape
    if h != hp:
        t = G.take(t, reflect_index(h, hp), axis=0)
    if w != wp:
        t = G.take(t, reflect_index(w, wp), axis=1)
    return t


def partition(t: Node, m: int, shift: int) -> Node:
    """``(Hp, Wp, C)`` with extents divisible by ``m`` to windows ``(nW, m*m, C)``."""
    hp, wp, c = t.shape
    if shift:
        t = G.roll(t, (-shift, -shift), (0, 1))
    t = G.reshape(t, (hp // m, m, wp // m, m, c))
    t = G.transpose(t, (0, 2, 1, 3, 4))
    return G.reshape(t, ((hp // m) * (wp // m), m * m, c))


def merge(windows: Node, m: int, shift: int, hp: int, wp: int) -> Node:
    c = windows.shape[-1]
    t = G.reshape(windows, (hp // m, wp // m, m, m, c))
    t = G.transpose(t, (0, 2, 1, 3, 4))
    t = G.reshape(t, (hp, wp, c))
    if shift:
        t = G.roll(t, (shift, shift), (0, 1))
    return t


def window_partition(x: np.ndarray, m: int, shift: int = 0):
    """Partition a ``(C, H, W)`` array into ``(nW, m*m, C)`` windows.

    The map is reflection-padded to multiples of ``m`` and cyclically shifted by
    ``-shift`` first.  Returns the windows and the padded extents needed by
    :func:`window_reverse`.
    """
    tape = Tape(record=False)
    c, h, w = x.shape
    hp, wp = padded_extent(h, m), padded_extent(w, m)
    t = pad_reflect(to_hwc(tape.constant(x)), hp, wp)
    return partition(t, m, shift).value, (hp, wp)


def window_reverse(windows: np.ndarray, m: int, shift: int, h: int, w: int) -> np.ndarray:
    tape = Tape(record=False)
    hp, wp = padded_extent(h, m), padded_extent(w, m)
    t = merge(tape.constant(windows), m, shift, hp, wp)
    return np.ascontiguousarray(np.transpose(t.value[:h, :w], (2, 0, 1)))


@lru_cache(maxsize=None)
def relative_position_index(m: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    pts = np.stack([ys.ravel(), xs.ravel()], axis=1)
    rel = pts[:, None, :] - pts[None, :, :] + (m - 1)
    return rel[..., 0] * (2 * m - 1) + rel[..., 1]


@lru_cache(maxsize=None)
def shift_mask(hp: int, wp: int, m: int, shift: int) -> np.ndarray | None:
    """Additive ``(nW, 1, N, N)`` mask blocking pairs that the cyclic shift made adjacent."""
    if not shift:
        return None
    label = np.zeros((hp, wp))
    cuts = (slice(0, -m), slice(-m, -shift), slice(-shift, None))
    n = 0
    for hs in cuts:
        for ws in cuts:
            label[hs, ws] = n
            n += 1
    tape = Tape(record=False)
    lw = partition(tape.constant(label[..., None]), m, 0).value[..., 0]  # (nW, N)
    mask = np.where(lw[:, None, :] != lw[:, :, None], MASK_VALUE, 0.0)
    return mask[:, None]


# -- attention -------------------------------------------------------------------

def attention_core(q: Node, k: Node, v: Node, bias_table: Node, heads: int, m: int,
                   mask: np.ndarray | None = None, probe: dict | None = None) -> Node:
    """Multi-head attention within windows; ``q, k, v`` are ``(nW, N, C)``."""
    nw, n, c = q.shape
    if c % heads:
        raise ValueError(f"channels {c} not divisible by {heads} heads")
    d = c // heads

    def split(t):
        return G.transpose(G.reshape(t, (nw, n, heads, d)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = G.scale(G.matmul(qh, G.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    bias = G.transpose(G.reshape(G.take(bias_table, relative_position_index(m).ravel(), axis=0),
                                 (n, n, heads)), (2, 0, 1))
    scores = G.add(scores, bias)
    if mask is not None:
        scores = G.add(scores, mask.astype(q.value.dtype))
    attn = G.softmax(scores, axis=-1)
    if probe is not None:
        probe["attn"] = attn.value
    out = G.matmul(attn, vh)
    return G.reshape(G.transpose(out, (0, 2, 1, 3)), (nw, n, c))


def window_attention(windows: Node, P: dict[str, Node], p: str, heads: int, m: int,
                     mask: np.ndarray | None = None, probe: dict | None = None) -> Node:
    """Project windows ``(nW, N, C)`` to Q/K/V, attend, and apply the output projection."""
    q = G.linear(windows, P[f"{p}.q.w"], P[f"{p}.q.b"])
    k = G.linear(windows, P[f"{p}.k.w"], P[f"{p}.k.b"])
    v = G.linear(windows, P[f"{p}.v.w"], P[f"{p}.v.b"])
    out = attention_core(q, k, v, P[f"{p}.bias"], heads, m, mask, probe)
    return G.linear(out, P[f"{p}.o.w"], P[f"{p}.o.b"])


# -- convolution branches -----------------------------------------------------------

def channel_attention(x: Node, P: dict[str, Node], p: str) -> Node:
    """Squeeze-excitation gate on a ``(C, H, W)`` map."""
    c = x.shape[0]
    s = G.mean(x, axis=(1, 2))
    s = G.activation(G.linear(s, P[f"{p}.down.w"], P[f"{p}.down.b"]), "relu")
    g = G.activation(G.linear(s, P[f"{p}.up.w"], P[f"{p}.up.b"]), "sigmoid")
    return G.mul(x, G.reshape(g, (c, 1, 1)))


def dwconv_block(x: Node, P: dict[str, Node], p: str) -> Node:
    y = G.depthwise_conv2d(x, P[f"{p}.dw.w"], P[f"{p}.dw.b"])
    y = G.conv2d(G.activation(y, "relu"), P[f"{p}.pw.w"], P[f"{p}.pw.b"])
    return channel_attention(y, P, f"{p}.ca")


def conv_block(x: Node, P: dict[str, Node], p: str) -> Node:
    y = G.conv2d(x, P[f"{p}.c1.w"], P[f"{p}.c1.b"])
    y = G.conv2d(G.activation(y, "relu"), P[f"{p}.c2.w"], P[f"{p}.c2.b"])
    return channel_attention(y, P, f"{p}.ca")


def _ffn_residual(y: Node, P, p) -> Node:
    h = G.layer_norm(y, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
    h = G.activation(G.linear(h, P[f"{p}.ffn.0.w"], P[f"{p}.ffn.0.b"]), "relu")
    return G.add(y, G.linear(h, P[f"{p}.ffn.1.w"], P[f"{p}.ffn.1.b"]))


# -- blocks -------------------------------------------------------------------------

def dbb_forward(x: Node, P: dict[str, Node], p: str, cfg: BackboneConfig,
                shift: int = 0, mode: str | None = None, probe: dict | None = None) -> Node:
    """Dual-branch block on a ``(C, H, W)`` map.

    ``mode`` overrides ``cfg.branch_mode``; see :data:`BRANCH_MODES`.
    """
    mode = mode or cfg.branch_mode
    c, h, w = x.shape
    m = cfg.window
    t = to_hwc(x)
    n1 = G.layer_norm(t, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
    hp, wp = padded_extent(h, m), padded_extent(w, m)
    n1p = pad_reflect(n1, hp, wp)
    v = G.linear(n1p, P[f"{p}.attn.v.w"], P[f"{p}.attn.v.b"])
    v_full = to_chw(G.crop(v, (slice(0, h), slice(0, w))))

    f_mhsa = None
    if mode != "conv_only":
        q = G.linear(n1p, P[f"{p}.attn.q.w"], P[f"{p}.attn.q.b"])
        k = G.linear(n1p, P[f"{p}.attn.k.w"], P[f"{p}.attn.k.b"])
        mask = shift_mask(hp, wp, m, shift)
        a = attention_core(partition(q, m, shift), partition(k, m, shift), partition(v, m, shift),
                           P[f"{p}.attn.bias"], cfg.heads, m, mask, probe)
        a = G.linear(a, P[f"{p}.attn.o.w"], P[f"{p}.attn.o.b"])
        f_mhsa = G.crop(merge(a, m, shift, hp, wp), (slice(0, h), slice(0, w)))

    if mode == "parallel":
        f_conv = to_hwc(dwconv_block(v_full, P, p))
        z = G.add(f_mhsa, f_conv)
    elif mode == "conv_on_input":
        f_conv = to_hwc(dwconv_block(to_chw(n1), P, p))
        z = G.add(f_mhsa, f_conv)
    elif mode == "sequential":
        f_conv = to_hwc(dwconv_block(to_chw(f_mhsa), P, p))
        z = f_conv
    elif mode == "attention_only":
        f_conv = None
        z = f_mhsa
    else:  # conv_only
        f_conv = to_hwc(dwconv_block(v_full, P, p))
        z = f_conv

    if probe is not None:
        if f_conv is not None:
            probe["conv"] = np.transpose(f_conv.value, (2, 0, 1))
        if f_mhsa is not None:
            probe["mhsa"] = np.transpose(f_mhsa.value, (2, 0, 1))
    y = G.add(t, G.linear(z, P[f"{p}.post.w"], P[f"{p}.post.b"]))
    return to_chw(_ffn_residual(y, P, p))


def sbb_forward(x: Node, P: dict[str, Node], p: str, cfg: BackboneConfig | None = None) -> Node:
    t = to_hwc(x)
    n1 = G.layer_norm(t, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
    z = to_hwc(conv_block(to_chw(n1), P, p))
    y = G.add(t, G.linear(z, P[f"{p}.post.w"], P[f"{p}.post.b"]))
    return to_chw(_ffn_residual(y, P, p))


def extract_features(img: Node, P: dict[str, Node], cfg: BackboneConfig, prefix: str = "bb",
                     probes: dict | None = None) -> Node:
    """``(3, H, W)`` image to ``(feat_channels, H, W)`` features.

    ``probes`` maps ``(stage, block)`` to a dict that receives the branch
    outputs of that DBB during the forward pass.
    """
    fs = G.conv2d(img, P[f"{prefix}.shallow.w"], P[f"{prefix}.shallow.b"])
    x = fs
    for i, st in enumerate(cfg.stages):
        n_dbb_seen = 0
        for j, kind in enumerate(st.kinds()):
            p = f"{prefix}.s{i}.b{j}"
            if kind == "sbb":
                x = sbb_forward(x, P, p, cfg)
                continue
            shift = cfg.window // 2 if n_dbb_seen % 2 else 0
            probe = probes.get((i, j)) if probes is not None else None
            x = dbb_forward(x, P, p, cfg, shift=shift, probe=probe)
            n_dbb_seen += 1
        x = G.conv2d(x, P[f"{prefix}.s{i}.conv.w"], P[f"{prefix}.s{i}.conv.b"])
    x = G.conv2d(x, P[f"{prefix}.final.w"], P[f"{prefix}.final.b"])
    if cfg.global_residual:
        x = G.add(x, fs)
    return x
