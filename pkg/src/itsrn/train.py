"""L1 training with Adam and a step-decay schedule.

Every step draws its batch from ``default_rng([seed, step])``, so a run resumed
from a checkpoint (which carries the Adam moments) replays the same stream as
an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import grad as G
from . import model as M
from . import upsampler as up

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch: int = 4
    patch: int = 24
    r_min: float = 1.0
    r_max: float = 2.0
    lr: float = 2e-4
    decay_at: tuple[float, ...] = (0.4, 0.8, 0.9, 0.95)
    decay_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    seed: int = 0
    log_every: int = 1
    ckpt_every: int = 0
    timing: bool = False

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "decay_at" in d:
            d["decay_at"] = tuple(d["decay_at"])
        return cls(**d)


def full_train_config(**kw) -> TrainConfig:
    """Batch 16, 48x48 LR patches, scales U(1, 4)."""
    return TrainConfig(batch=16, patch=48, r_min=1.0, r_max=4.0, **kw)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Learning rate for a 0-based ``step``: halved at each configured fraction of the run."""
    n = sum(step >= int(f * cfg.steps) for f in cfg.decay_at)
    return cfg.lr * cfg.decay_factor ** n


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        """Bias-corrected Adam update, in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = tensors[f"adam.m.{k}"].copy()
            self.v[k] = tensors[f"adam.v.{k}"].copy()
        self.t = t


def adam_step(params, grads, state: Adam, lr: float):
    state.step(params, grads, lr)
    return params, state


def batch_loss(model: M.Model, batch: D.TrainBatch, tape: G.Tape) -> G.Node:
    """L1 loss over the sampled GT pixels; the upsampler only decodes those queries."""
    P = model.nodes(tape)
    dtype = model.cfg.dtype
    preds = []
    for i in range(batch.lr.shape[0]):
        feats = model.features(tape, batch.lr[i], P)
        preds.append(up.query_rgb(feats, batch.coords[i], batch.cells[i], P, model.cfg.upsampler))
    pred = G.concat(preds, axis=0) if len(preds) > 1 else preds[0]
    gt = batch.gt.reshape(-1, 3).astype(dtype)
    return G.l1_loss(pred, gt)


def l1_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


def make_step_batch(pool, cfg: TrainConfig, step: int) -> D.TrainBatch:
    rng = np.random.default_rng([cfg.seed, step])
    return D.make_batch(pool, cfg.batch, cfg.patch, cfg.patch, (cfg.r_min, cfg.r_max), rng,
                        augment=cfg.augment)


def _log_record(step, lr, loss, wall_ms):
    # fixed key order; wall_ms stays 0 unless timing is enabled so logs are reproducible
    return json.dumps({"step": step, "lr": lr, "loss": loss, "wall_ms": wall_ms})


def save_training_checkpoint(path, model: M.Model, opt: Adam, cfg: TrainConfig, step: int):
    M.save(model, path, extra=opt.state(), meta={"step": step, "adam_t": opt.t, "train": cfg.to_dict()})


def train_loop(model: M.Model, pool, cfg: TrainConfig, out_dir=None, resume=None,
               producer: bool = False) -> dict:
    """Optimize ``model`` in place.

    Writes ``metrics.jsonl``, ``step_XXXXXX.ckpt`` every ``ckpt_every`` steps and
    ``final.ckpt`` into ``out_dir`` when given.  ``resume`` is a checkpoint
    written by this loop; training continues from the step after it.
    Returns ``{"losses": [...], "log": [...lines]}``.
    """
    opt = Adam(model.params, cfg.beta1, cfg.beta2, cfg.eps)
    start = 0
    if resume is not None:
        loaded, extra, meta = M.load(resume, expect=model.cfg, with_extra=True)
        model.params = {k: v.copy() for k, v in loaded.params.items()}
        opt = Adam(model.params, cfg.beta1, cfg.beta2, cfg.eps)
        opt.load_state(extra, int(meta["adam_t"]))
        start = int(meta["step"]) + 1
    out = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_f = open(out / "metrics.jsonl", "a" if resume is not None else "w")
    feeder = D.BatchProducer(lambda s: make_step_batch(pool, cfg, s), start, cfg.steps) if producer else None
    losses, lines = [], []
    try:
        for step in range(start, cfg.steps):
            t0 = time.perf_counter()
            batch = feeder.get()[1] if feeder else make_step_batch(pool, cfg, step)
            tape = G.Tape()
            loss = batch_loss(model, batch, tape)
            value = float(loss.value)
            if not np.isfinite(value):
                _dump_divergence(out, step, value, model)
                raise TrainingDiverged(f"non-finite loss {value} at step {step}")
            grads = G.backward(tape, loss)
            lr = learning_rate(cfg, step)
            opt.step(model.params, grads, lr)
            losses.append(value)
            wall = round((time.perf_counter() - t0) * 1000.0, 3) if cfg.timing else 0
            if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                line = _log_record(step, lr, value, wall)
                lines.append(line)
                if log_f:
                    log_f.write(line + "\n")
                    log_f.flush()
            if out is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
                save_training_checkpoint(out / f"step_{step:06d}.ckpt", model, opt, cfg, step)
        if out is not None:
            save_training_checkpoint(out / "final.ckpt", model, opt, cfg, cfg.steps - 1)
    finally:
        if log_f:
            log_f.close()
    return {"losses": losses, "log": lines, "optimizer": opt}


def _dump_divergence(out, step, value, model):
    report = {"step": step, "loss": repr(value),
              "nonfinite_params": [k for k, v in model.params.items() if not np.all(np.isfinite(v))],
              "param_absmax": {k: float(np.abs(v[np.isfinite(v)]).max(initial=0.0)) for k, v in model.params.items()}}
    log.error("training diverged: %s", report)
    if out is not None:
        (Path(out) / f"diverged_step{step:06d}.json").write_text(json.dumps(report, indent=2))
