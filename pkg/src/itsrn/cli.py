"""Command-line interface: ``itsrn <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage, path, format or config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import config as C
from . import coords as co
from . import data as D
from . import eval as E
from . import model as M
from . import numerics as nx
from . import train as T

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
log = logging.getLogger("itsrn")


class UsageError(Exception):
    pass


USAGE_ERRORS = (UsageError, C.ConfigError, M.CheckpointError, D.ImageFormatError, D.TooSmallError,
                FileNotFoundError, NotADirectoryError, E.NotDualBranchError)


def _scale(text: str) -> float:
    try:
        r = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 1.0 <= r <= M.MAX_SCALE:
        raise argparse.ArgumentTypeError(f"scale must lie in [1, {M.MAX_SCALE:g}], got {r:g}")
    return r


def _scales(text: str) -> list[float]:
    return [_scale(t) for t in text.split(",") if t.strip()]


def _existing_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


def _existing_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"directory not found: {p}")
    return p


def _load_images(path, what="data") -> list[np.ndarray]:
    imgs = D.load_dir(_existing_dir(path))
    if not imgs:
        raise UsageError(f"no .ppm images in {what} directory {path}")
    return imgs


# -- subcommands ------------------------------------------------------------------

def cmd_sr(args) -> int:
    model = M.load(_existing_file(args.model))
    lr = D.load_ppm(_existing_file(args.inp))
    t0 = time.perf_counter()
    sr = model.forward(lr, args.scale)
    dt = time.perf_counter() - t0
    D.save_ppm(sr, args.out)
    h, w = co.output_shape(lr.shape[1], lr.shape[2], args.scale)
    print(f"{lr.shape[1]}x{lr.shape[2]} -> {h}x{w} (x{args.scale:g}) in {dt:.2f} s -> {args.out}")
    return EXIT_OK


def _run_config(args) -> C.RunConfig:
    rc = C.load(args.config) if args.config else C.RunConfig()
    if args.seed is not None:
        rc.train = T.TrainConfig.from_dict({**rc.train.to_dict(), "seed": args.seed})
        rc.model_seed = args.seed
    return rc


def cmd_train(args) -> int:
    rc = _run_config(args)
    pool = _load_images(args.data)
    model = M.Model(rc.model, seed=rc.model_seed)
    out = Path(args.out)
    t0 = time.perf_counter()
    res = T.train_loop(model, pool, rc.train, out_dir=out,
                       resume=_existing_file(args.resume) if args.resume else None,
                       producer=args.prefetch)
    losses = res["losses"]
    last = f"{losses[-1]:.5f}" if losses else "n/a"
    print(f"trained {len(losses)} steps ({model.n_params} params) in {time.perf_counter() - t0:.1f} s; "
          f"final loss {last}; checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    imgs = _load_images(args.data)
    names = [p.stem for p in sorted(Path(args.data).glob("*.ppm"))]
    if not args.baseline and not args.model:
        raise UsageError("--model is required unless --baseline is given")
    model = None if args.baseline else M.load(_existing_file(args.model))
    rep = E.evaluate(model, imgs, args.scales, names, args.train_scale_max, baseline=args.baseline)
    print(rep.format())
    if args.tsv:
        Path(args.tsv).write_text(rep.to_tsv())
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = _run_config(args)
    pool = _load_images(args.data)
    evals = _load_images(args.eval_data, "eval") if args.eval_data else pool
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    for a in axes:
        if a not in E.REFERENCE_ROWS:
            raise UsageError(f"unknown ablation axis {a!r}; expected some of {sorted(E.REFERENCE_ROWS)}")
    tables = E.run_ablation(rc.model, pool, evals, rc.train, axes, scale=args.scale,
                            model_seed=rc.model_seed)
    for t in tables:
        print(t.format())
        print()
    if args.tsv:
        Path(args.tsv).write_text("".join(t.to_tsv() for t in tables))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    names = set(args.only.split(",")) if args.only else None
    unknown = (names or set()) - set(gradcheck.registry())
    if unknown:
        raise UsageError(f"unknown ops {sorted(unknown)}; see --list")
    if args.list:
        print("\n".join(gradcheck.registry()))
        return EXIT_OK
    t0 = time.perf_counter()
    reports = gradcheck.run(seeds=args.seeds, include_model=not args.no_model, names=names)
    print(f"{'op':<28}{'max rel err':>14}{'checked':>9}{'kinks':>7}  status")
    failed = []
    for name, rep in reports.items():
        ok = rep.passed(args.tol)
        failed += [] if ok else [name]
        print(f"{name:<28}{rep.worst:>14.3e}{sum(rep.checked.values()):>9}"
              f"{sum(rep.skipped.values()):>7}  {'ok' if ok else 'FAIL'}")
    print(f"{len(reports) - len(failed)}/{len(reports)} ops within {args.tol:g} "
          f"({time.perf_counter() - t0:.1f} s)")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_spectrum(args) -> int:
    model = M.load(_existing_file(args.model))
    img = D.load_ppm(_existing_file(args.inp))
    if (args.stage is None) != (args.block is None):
        raise UsageError("--stage and --block go together")
    if args.stage is None:
        dbbs = [(i, j) for i, st in enumerate(model.cfg.backbone.stages)
                for j, kind in enumerate(st.kinds()) if kind == "dbb"]
        if not dbbs:
            raise E.NotDualBranchError("model has no dual-branch block")
        args.stage, args.block = dbbs[min(1, len(dbbs) - 1)]
    spec = E.branch_spectrum(model, img, args.stage, args.block)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for key in ("conv", "mhsa"):
        mag = np.log1p(spec[key])
        mag = mag / mag.max() if mag.max() > 0 else mag
        D.save_ppm(np.repeat(mag[None], 3, axis=0), out / f"spectrum_{key}.ppm")
    print(f"block ({args.stage}, {args.block}) high-frequency energy ratio: "
          f"conv {spec['hf_conv']:.4f}  mhsa {spec['hf_mhsa']:.4f}")
    print(f"wrote {out / 'spectrum_conv.ppm'} and {out / 'spectrum_mhsa.ppm'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = 0 if args.seed is None else args.seed
    for i in range(args.n):
        D.save_ppm(D.synth_sci(base * 100003 + i, args.size, args.size), out / f"sci_{i:04d}.ppm")
    print(f"wrote {args.n} images to {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every seed (default: config or 0)")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="itsrn", description="Arbitrary-scale super-resolution for screen content.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sr", parents=[common], help="super-resolve one PPM image")
    s.add_argument("--model", required=True, help="checkpoint path")
    s.add_argument("--in", dest="inp", required=True, help="input .ppm")
    s.add_argument("--scale", type=_scale, required=True, help="magnification in [1, 64]")
    s.add_argument("--out", required=True, help="output .ppm")
    s.set_defaults(fn=cmd_sr)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--config", help="YAML run config (default: desk preset)")
    s.add_argument("--data", required=True, help="directory of training .ppm images")
    s.add_argument("--out", required=True, help="output directory for checkpoints and metrics.jsonl")
    s.add_argument("--resume", help="training checkpoint to continue from")
    s.add_argument("--prefetch", action="store_true", help="build batches on a background thread")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM over a directory")
    s.add_argument("--model", help="checkpoint path")
    s.add_argument("--data", required=True, help="directory of HR .ppm images")
    s.add_argument("--scales", type=_scales, default=[2.0, 3.0, 4.0], help="comma list, e.g. 2,3,4,6")
    s.add_argument("--train-scale-max", type=float, default=4.0,
                   help="largest scale seen in training; larger scales are reported out-of-training-scale")
    s.add_argument("--baseline", action="store_true", help="evaluate bicubic instead of a model")
    s.add_argument("--tsv", help="also write per-image rows to this file")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="train and evaluate ablation variants")
    s.add_argument("--config", help="YAML run config for the base model and training")
    s.add_argument("--data", required=True, help="training .ppm directory")
    s.add_argument("--eval-data", help="evaluation .ppm directory (default: training data)")
    s.add_argument("--axes", default="upsampler,reweight,branch")
    s.add_argument("--scale", type=_scale, default=4.0)
    s.add_argument("--tsv", help="also write the tables as TSV")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    s.add_argument("--seeds", type=int, default=2)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--only", help="comma list of op names")
    s.add_argument("--no-model", action="store_true", help="skip the whole-model check")
    s.add_argument("--list", action="store_true", help="list registered ops and exit")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("spectrum", parents=[common], help="Fourier spectra of one block's two branches")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--stage", type=int, help="stage index (default: the second dual-branch block)")
    s.add_argument("--block", type=int, help="block index within the stage")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_spectrum)

    s = sub.add_parser("synth", parents=[common], help="write seeded synthetic screen-content images")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limits = threadpool_limits(limits=args.threads)
    else:
        limits = nullcontext()
    try:
        with limits:
            return args.fn(args)
    except USAGE_ERRORS as e:
        print(f"itsrn {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (T.TrainingDiverged, nx.ShapeError, ValueError, RuntimeError, OSError) as e:
        print(f"itsrn {args.command}: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
