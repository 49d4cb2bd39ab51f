"""End-to-end model (backbone + upsampler), presets, and checkpoint files.

Checkpoint layout (all integers little-endian)::

    b"ITSR" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | payload

The manifest holds ``format_version``, the model ``config``, a ``tensors`` list
of ``{name, shape, dtype, offset, nbytes}`` records addressing the payload, and
a free-form ``meta`` object.  Payload tensors are raw little-endian scalars.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import coords as co
from . import upsampler as up
from .grad import Node, Tape

MAGIC = b"ITSR"
FORMAT_VERSION = 1
MAX_SCALE = 64.0
PRESETS = ("paper", "desk")
DTYPES = {"float32": np.float32, "float64": np.float64}


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint."""


@dataclass(frozen=True)
class ModelConfig:
    backbone: bb.BackboneConfig = field(default_factory=bb.BackboneConfig)
    upsampler: up.UpsamplerConfig = field(default_factory=up.UpsamplerConfig)
    precision: str = "float32"
    preset: str = "paper"

    def __post_init__(self):
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {self.precision!r}")
        if self.upsampler.c_feat != self.backbone.feat_channels:
            raise ValueError("upsampler c_feat must equal backbone feat_channels")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        b = dict(d["backbone"])
        b["stages"] = tuple(bb.StageConfig(**s) for s in b["stages"])
        return cls(backbone=bb.BackboneConfig(**b), upsampler=up.UpsamplerConfig(**d["upsampler"]),
                   precision=d.get("precision", "float32"), preset=d.get("preset", "custom"))

    def replace(self, **kw) -> "ModelConfig":
        """Copy with top-level fields or ``backbone__x`` / ``upsampler__x`` overrides."""
        bkw = {k[10:]: kw.pop(k) for k in list(kw) if k.startswith("backbone__")}
        ukw = {k[11:]: kw.pop(k) for k in list(kw) if k.startswith("upsampler__")}
        if bkw:
            kw["backbone"] = dataclasses.replace(self.backbone, **bkw)
        if ukw:
            kw["upsampler"] = dataclasses.replace(self.upsampler, **ukw)
        return dataclasses.replace(self, **kw)


def preset(name: str, **overrides) -> ModelConfig:
    if name == "paper":
        cfg = ModelConfig(preset="paper")
    elif name == "desk":
        cfg = ModelConfig(
            backbone=bb.BackboneConfig(
                stages=(bb.StageConfig(1, 0.0, 16), bb.StageConfig(2, 1.0, 16)),
                feat_channels=16, window=4, heads=2),
            upsampler=up.UpsamplerConfig(c_feat=16, c_up=32, hidden=32),
            preset="desk")
    else:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")
    return cfg.replace(**overrides) if overrides else cfg


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = bb.param_shapes(cfg.backbone)
    shapes.update(up.param_shapes(cfg.upsampler))
    return shapes


def _trunc_normal(rng, shape, std):
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fan-in scaled initialization.

    Linear weights and all layer biases ~ U(+-1/sqrt(fan_in)), conv weights
    Kaiming-uniform, relative-position tables truncated normal (std 0.02),
    layer-norm gains 1 and shifts 0.
    """
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        stem, leaf = name.rsplit(".", 1)
        if leaf == "g":
            v = np.ones(shape)
        elif leaf == "bias":
            v = _trunc_normal(rng, shape, 0.02)
        elif leaf == "b" and stem.split(".")[-1].startswith("ln"):
            v = np.zeros(shape)
        elif leaf == "b":
            fan_in = int(np.prod(shapes[stem + ".w"][1:]))
            v = rng.uniform(-1, 1, size=shape) / np.sqrt(fan_in)
        elif len(shape) == 2:
            v = rng.uniform(-1, 1, size=shape) / np.sqrt(shape[1])
        else:
            fan_in = int(np.prod(shape[1:]))
            v = rng.uniform(-1, 1, size=shape) * np.sqrt(6.0 / fan_in)
        params[name] = v.astype(cfg.dtype)
    return params


class Model:
    """Parameters plus configuration; inference through :meth:`forward`."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = init_params(cfg, seed) if params is None else params

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def nodes(self, tape: Tape) -> dict[str, Node]:
        return {k: tape.param(k, v) for k, v in self.params.items()}

    def features(self, tape: Tape, lr: np.ndarray, P=None, probes=None) -> Node:
        P = self.nodes(tape) if P is None else P
        img = tape.constant(np.asarray(lr, dtype=self.cfg.dtype))
        return bb.extract_features(img, P, self.cfg.backbone, probes=probes)

    def forward(self, lr: np.ndarray, r: float) -> np.ndarray:
        """Super-resolve a ``(3, H, W)`` image in [0, 1] by factor ``r``."""
        if not 1.0 <= r <= MAX_SCALE:
            raise ValueError(f"scale must lie in [1, {MAX_SCALE:g}], got {r}")
        if lr.ndim != 3 or lr.shape[0] != 3:
            raise ValueError(f"expected a (3, H, W) image, got shape {lr.shape}")
        h_hr, w_hr = co.output_shape(lr.shape[1], lr.shape[2], r)
        tape = Tape(record=False)
        P = self.nodes(tape)
        feats = self.features(tape, lr, P)
        return up.upsample(feats, h_hr, w_hr, P, self.cfg.upsampler).value

    __call__ = forward


# -- checkpoints -------------------------------------------------------------------

def save(model: Model, path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None):
    """Write ``model`` (and optional extra tensors such as optimizer moments)."""
    tensors = dict(model.params)
    for k, v in (extra or {}).items():
        tensors[f"extra/{k}"] = v
    records, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        data = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
        records.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.name,
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = json.dumps({"format_version": FORMAT_VERSION, "config": model.cfg.to_dict(),
                           "tensors": records, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(manifest)))
        f.write(manifest)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def read_checkpoint(path):
    """Return ``(config, tensors, meta)`` from a checkpoint file."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, mlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
        cfg = ModelConfig.from_dict(manifest["config"])
        records = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
    payload = memoryview(raw)[16 + mlen:]
    tensors = {}
    for rec in records:
        end = rec["offset"] + rec["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated; tensor {rec['name']!r} is incomplete")
        dt = np.dtype(rec["dtype"]).newbyteorder("<")
        arr = np.frombuffer(payload[rec["offset"]:end], dtype=dt).reshape(rec["shape"])
        tensors[rec["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return cfg, tensors, manifest.get("meta", {})


def load(path, expect: ModelConfig | None = None, with_extra: bool = False):
    """Load a model; with ``expect`` set, tensor shapes are validated against that config."""
    cfg, tensors, meta = read_checkpoint(path)
    target = expect or cfg
    shapes = param_shapes(target)
    for name, shape in shapes.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r} required by config")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: shape mismatch for {name!r}: "
                                  f"checkpoint {tuple(tensors[name].shape)} vs config {tuple(shape)}")
    params = {k: tensors[k] for k in shapes}
    model = Model(target, params)
    if not with_extra:
        return model
    extra = {k[6:]: v for k, v in tensors.items() if k.startswith("extra/")}
    return model, extra, meta
