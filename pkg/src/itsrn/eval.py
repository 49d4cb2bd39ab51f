"""Fidelity metrics, evaluation reports, ablation runner and branch spectra."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import model as M
from . import numerics as nx
from . import train as T
from .grad import Tape

PSNR_IDENTICAL = math.inf


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images on [0, 1]; identical inputs give ``inf``."""
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering of a 2-D array."""
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, win: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM with a Gaussian window, computed per channel and averaged."""
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < win:
        raise ValueError(f"ssim: image {a.shape[-2:]} smaller than the {win}x{win} window")
    g = gaussian_window(win, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for x, y in zip(np.asarray(a, np.float64), np.asarray(b, np.float64)):
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class MetricRow:
    name: str
    scale: float
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    variant: str = ""
    reweight: str = ""
    train_scale_max: float = 4.0

    def mean(self, scale: float):
        sel = [r for r in self.rows if r.scale == scale]
        return (float(np.mean([r.psnr for r in sel])), float(np.mean([r.ssim for r in sel])))

    @property
    def scales(self):
        return sorted({r.scale for r in self.rows})

    def format(self) -> str:
        lines = [f"{'split':<22}{'scale':>7}{'PSNR':>9}{'SSIM':>9}"]
        for s in self.scales:
            split = "in-training-scale" if s <= self.train_scale_max else "out-of-training-scale"
            p, q = self.mean(s)
            lines.append(f"{split:<22}{'x%g' % s:>7}{p:>9.2f}{q:>9.4f}")
        return "\n".join(lines)

    def to_tsv(self) -> str:
        out = ["image\tscale\tpsnr\tssim"]
        out += [f"{r.name}\t{r.scale:g}\t{r.psnr:.6f}\t{r.ssim:.6f}" for r in self.rows]
        return "\n".join(out) + "\n"


def evaluate(model: M.Model, images, scales, names=None, train_scale_max: float = 4.0,
             baseline: bool = False) -> MetricReport:
    """PSNR/SSIM of ``model`` (or bicubic when ``baseline``) on HR ``images`` at each scale."""
    names = names or [f"img{i:03d}" for i in range(len(images))]
    rep = MetricReport(variant=model.cfg.upsampler.variant if model else "bicubic",
                       reweight=model.cfg.upsampler.reweight if model else "",
                       train_scale_max=train_scale_max)
    for s in scales:
        for name, hr in zip(names, images):
            lr, gt = D.make_pair(hr, s)
            if baseline:
                sr = nx.bicubic_resize(lr, gt.shape[1], gt.shape[2])
            else:
                sr = model.forward(lr, s)
            sr = np.clip(sr, 0.0, 1.0)
            rep.rows.append(MetricRow(name, float(s), psnr(sr, gt), ssim(sr, gt)))
    return rep


# -- ablations ------------------------------------------------------------------

REFERENCE_ROWS = {
    "upsampler": [("bilinear_only", "only V (Bilinear)", "28.03 / 0.9275", "24.35 / 0.8498"),
                  ("liif_concat", "concatenation", "31.25 / 0.9571", "27.37 / 0.9073"),
                  ("modulation", "modulation", "31.66 / 0.9597", "27.84 / 0.9149")],
    "reweight": [("sin", "sin", "31.66 / 0.9597", "27.84 / 0.9149"),
                 ("tanh", "sin -> tanh", "31.42 / 0.9587", "27.67 / 0.9135"),
                 ("sigmoid", "sin -> sigmoid", "31.36 / 0.9585", "27.58 / 0.9120"),
                 ("softmax", "sin -> softmax", "31.29 / 0.9578", "27.52 / 0.9113")],
    "branch": [("sequential", "Sequential", "26.92 / 0.9033"),
               ("attention_only", "Attention only", "27.38 / 0.9099"),
               ("conv_only", "DWConv only", "26.24 / 0.8942"),
               ("conv_on_input", "Parallel DWConv on input", "27.63 / 0.9133"),
               ("parallel", "Parallel DWConv on V", "27.84 / 0.9149")],
}


@dataclass
class AblationTable:
    axis: str
    rows: list[dict] = field(default_factory=list)

    def format(self) -> str:
        head = f"{'configuration':<30}{'params':>9}{'PSNR':>9}{'SSIM':>9}   reference (x4)"
        out = [f"[{self.axis}]", head]
        for r in self.rows:
            out.append(f"{r['label']:<30}{r['params']:>9}{r['psnr']:>9.2f}{r['ssim']:>9.4f}   {r['reference']}")
        return "\n".join(out)

    def to_tsv(self) -> str:
        out = ["axis\tconfig\tparams\tpsnr\tssim"]
        out += [f"{self.axis}\t{r['config']}\t{r['params']}\t{r['psnr']:.6f}\t{r['ssim']:.6f}" for r in self.rows]
        return "\n".join(out) + "\n"


def _override(base: M.ModelConfig, axis: str, value: str) -> M.ModelConfig:
    if axis == "upsampler":
        return base.replace(upsampler__variant=value)
    if axis == "reweight":
        return base.replace(upsampler__reweight=value)
    if axis == "branch":
        return base.replace(backbone__branch_mode=value)
    raise ValueError(f"unknown ablation axis {axis!r}")


def run_ablation(base: M.ModelConfig, pool, eval_images, train_cfg: T.TrainConfig,
                 axes=("upsampler", "reweight", "branch"), scale: float = 4.0,
                 model_seed: int = 0) -> list[AblationTable]:
    """Train and evaluate every configuration along each axis with shared seeds.

    Only the named field changes between rows of a table; data, training seed,
    initialization seed and evaluation images are identical.
    """
    if not pool or not eval_images:
        raise ValueError("run_ablation needs a non-empty training pool and evaluation set")
    tables = []
    for axis in axes:
        table = AblationTable(axis)
        for entry in REFERENCE_ROWS[axis]:
            value, label, *reference = entry
            cfg = _override(base, axis, value)
            model = M.Model(cfg, seed=model_seed)
            T.train_loop(model, pool, train_cfg)
            rep = evaluate(model, eval_images, [scale])
            p, s = rep.mean(float(scale))
            table.rows.append({"config": value, "label": label, "params": model.n_params,
                               "psnr": p, "ssim": s, "reference": " | ".join(reference)})
        tables.append(table)
    return tables


# -- branch spectra -------------------------------------------------------------

class NotDualBranchError(ValueError):
    pass


def high_frequency_ratio(mag: np.ndarray) -> float:
    """Share of spectral energy outside the central ``H/2 x W/2`` region of a centred spectrum."""
    h, w = mag.shape
    e = mag.astype(np.float64) ** 2
    total = e.sum()
    if total == 0:
        return 0.0
    y0, x0 = h // 2 - h // 4, w // 2 - w // 4
    inner = e[y0:y0 + h // 2, x0:x0 + w // 2].sum()
    return float((total - inner) / total)


def branch_spectrum(model: M.Model, img: np.ndarray, stage: int, block: int):
    """Channel-averaged centred spectra of the conv and attention branches of one DBB.

    Returns ``{"conv": map, "mhsa": map, "hf_conv": ratio, "hf_mhsa": ratio}``.
    """
    cfg = model.cfg.backbone
    try:
        kind = cfg.stages[stage].kinds()[block]
    except IndexError:
        raise ValueError(f"no block ({stage}, {block}) in this backbone") from None
    if kind != "dbb":
        raise NotDualBranchError(f"block ({stage}, {block}) is a single-branch block without an attention branch")
    probe: dict = {}
    model.features(Tape(record=False), img, probes={(stage, block): probe})
    if "conv" not in probe or "mhsa" not in probe:
        raise NotDualBranchError(f"branch mode {cfg.branch_mode!r} does not expose both branches")
    out = {}
    for key in ("conv", "mhsa"):
        feats = probe[key]
        mag = np.mean([nx.fft2_magnitude(ch) for ch in feats], axis=0)
        out[key] = mag
        out[f"hf_{key}"] = high_frequency_ratio(mag)
    return out
