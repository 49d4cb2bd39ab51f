"""YAML run configuration: model preset plus overrides and training settings.

Schema (every key optional)::

    model:
      preset: desk            # desk | paper
      precision: float32      # float32 | float64
      seed: 0                 # parameter initialization seed
      backbone:               # any BackboneConfig field
        stages: [[1, 0.0, 16], [2, 1.0, 16]]   # (blocks, dbb_ratio, channels)
        window: 4
      upsampler:              # any UpsamplerConfig field
        reweight: sin
    train:                    # any TrainConfig field
      steps: 500
      batch: 4

Unknown keys, wrong types and bad values raise :class:`ConfigError` naming the
key path and the line it appears on.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import backbone as bb
from . import model as M
from . import train as T
from . import upsampler as up


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: M.ModelConfig = field(default_factory=lambda: M.preset("desk"))
    train: T.TrainConfig = field(default_factory=T.TrainConfig)
    model_seed: int = 0


def _plain(node, path, lines):
    """Convert a composed YAML node to Python values, recording key lines."""
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            sub = f"{path}.{key}" if path else key
            if key in out:
                raise ConfigError(f"line {k.start_mark.line + 1}: duplicate key {sub!r}")
            lines[sub] = k.start_mark.line + 1
            out[key] = _plain(v, sub, lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_plain(v, f"{path}[{i}]", lines) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _coerce(value, default, key, line):
    where = f"line {line}: key {key!r}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot (1e-3) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _section(raw, cls, path, lines, special=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"line {lines.get(path, '?')}: {path!r} must be a mapping")
    known = _fields(cls)
    defaults = cls()
    out = {}
    for key, value in raw.items():
        full = f"{path}.{key}"
        line = lines.get(full, "?")
        if key not in known:
            raise ConfigError(f"line {line}: unknown key {full!r}; expected one of {sorted(known)}")
        if special and key in special:
            out[key] = special[key](value, full, line)
        else:
            out[key] = _coerce(value, getattr(defaults, key), full, line)
    return out


def _stages(value, key, line):
    try:
        return tuple(bb.StageConfig(int(b), float(a), int(c)) for b, a, c in value)
    except (TypeError, ValueError):
        raise ConfigError(f"line {line}: key {key!r}: expected a list of [blocks, dbb_ratio, channels]") from None


MODEL_KEYS = {"preset", "precision", "seed", "backbone", "upsampler"}
TOP_KEYS = {"model", "train"}


def parse(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "?"
        raise ConfigError(f"{source}: {where}: YAML syntax error: {getattr(e, 'problem', e)}") from None
    if root is None:
        return RunConfig()
    lines: dict = {}
    try:
        raw = _plain(root, "", lines)
        if not isinstance(raw, dict):
            raise ConfigError("line 1: top level must be a mapping")
        for key in raw:
            if key not in TOP_KEYS:
                raise ConfigError(f"line {lines[key]}: unknown key {key!r}; expected one of {sorted(TOP_KEYS)}")
        m = raw.get("model", {}) or {}
        if not isinstance(m, dict):
            raise ConfigError(f"line {lines['model']}: 'model' must be a mapping")
        for key in m:
            if key not in MODEL_KEYS:
                raise ConfigError(f"line {lines['model.' + key]}: unknown key 'model.{key}'; "
                                  f"expected one of {sorted(MODEL_KEYS)}")
        kw = {}
        if "precision" in m:
            kw["precision"] = m["precision"]
        for k, v in _section(m.get("backbone", {}) or {}, bb.BackboneConfig, "model.backbone", lines,
                             {"stages": _stages}).items():
            kw[f"backbone__{k}"] = v
        for k, v in _section(m.get("upsampler", {}) or {}, up.UpsamplerConfig, "model.upsampler",
                             lines).items():
            kw[f"upsampler__{k}"] = v
        if "backbone__feat_channels" in kw and "upsampler__c_feat" not in kw:
            kw["upsampler__c_feat"] = kw["backbone__feat_channels"]
        seed = m.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"line {lines['model.seed']}: key 'model.seed': expected an integer")
        try:
            mcfg = M.preset(m.get("preset", "desk"), **kw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"line {lines.get('model', 1)}: invalid model section: {e}") from None
        t = _section(raw.get("train", {}) or {}, T.TrainConfig, "train", lines)
        try:
            tcfg = T.TrainConfig(**t)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"line {lines.get('train', 1)}: invalid train section: {e}") from None
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None
    return RunConfig(model=mcfg, train=tcfg, model_seed=seed)


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse(p.read_text(), str(p))
