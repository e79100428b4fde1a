"""``symbox`` command line: gen, train, eval, gradcheck, sweep.

Exit codes: 0 ok, 1 usage or configuration error, 2 numeric failure, 3 I/O error.
Settings come from an optional JSON run config; command-line flags override it.
The seed falls back to ``$SYMBOX_SEED`` when neither the flag nor the config sets one.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, DatasetFormatError, InvalidArgumentError, NumericError
from .evaluate import build_report, collect_predictions
from .synth import generate_dataset, load_dataset, noisy_dataset, sample_dataset, save_dataset

logger = logging.getLogger("symbox")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class OutputExistsError(OSError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def versions() -> dict:
    import scipy

    out = {"symbox": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__}
    try:
        import matplotlib

        out["matplotlib"] = matplotlib.__version__
    except ImportError:
        out["matplotlib"] = None
    return out


def prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise OutputExistsError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise OutputExistsError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, config: RunConfig, extra: dict) -> Path:
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config.to_dict(),
        "seed": config.resolved_seed(),
        "versions": versions(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path


def split_seed(seed: int, split: str) -> int:
    ss = np.random.SeedSequence([seed, SPLITS.index(split)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def base_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    seed = cfg.resolved_seed()
    return cfg.with_seed(seed)


def override_train(cfg: RunConfig, args) -> RunConfig:
    tr = cfg.train
    w = tr.weights
    if getattr(args, "lambda_flp", None) is not None:
        w = replace(w, lambda_flp=args.lambda_flp)
    if getattr(args, "mu_ss", None) is not None:
        w = replace(w, mu_ss=args.mu_ss)
    changes = {"weights": w}
    for flag, key in (("steps", "steps"), ("coder", "coder"), ("box_loss", "box_loss"), ("padding", "padding"),
                      ("lr", "lr"), ("batch_size", "batch_size")):
        v = getattr(args, flag, None)
        if v is not None:
            changes[key] = v
    for flag in ("ss_only", "rr_augment", "multiplex"):
        if getattr(args, flag, False):
            changes[flag] = True
    return replace(cfg, train=replace(tr, **changes))


def load_splits(data_dir, names=SPLITS) -> dict:
    d = Path(data_dir)
    return {n: load_dataset(d / f"{n}.bin") for n in names}


def write_rows(path, rows: list, columns) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return Path(path)


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    cfg = base_config(args)
    data = cfg.data
    changes = {}
    for flag, key in (("n_train", "n_train"), ("n_val", "n_val"), ("n_test", "n_test"),
                      ("sample_pct", "sample_pct"), ("noise_sigma", "noise_sigma")):
        v = getattr(args, flag)
        if v is not None:
            changes[key] = v
    cfg = replace(cfg, data=replace(data, **changes))
    out = prepare_out(args.out, args.force)
    seed = cfg.resolved_seed()
    counts = {}
    t0 = time.perf_counter()
    sizes = {"train": cfg.data.n_train, "val": cfg.data.n_val, "test": cfg.data.n_test}
    for split, n in sizes.items():
        scenes = generate_dataset(cfg.synth, n, split_seed(seed, split), workers=args.workers)
        if split == "train":
            scenes = noisy_dataset(scenes, cfg.data.noise_sigma, seed)
            if cfg.data.sample_pct < 100:
                scenes = sample_dataset(scenes, cfg.data.sample_pct, seed)
        save_dataset(out / f"{split}.bin", scenes)
        counts[split] = len(scenes)
    write_manifest(out, "gen", cfg, {"counts": counts, "split_seeds": {s: split_seed(seed, s) for s in SPLITS},
                                     "wall_time_s": time.perf_counter() - t0})
    print(f"wrote {counts['train']}/{counts['val']}/{counts['test']} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import CSV_COLUMNS, save_checkpoint, train

    cfg = override_train(base_config(args), args)
    splits = load_splits(args.data, ("train", "val"))
    out = prepare_out(args.out, args.force)
    rows = []
    csv_path = out / "metrics.csv"

    def on_epoch(row):
        rows.append(row)
        write_rows(csv_path, rows, CSV_COLUMNS)
        logger.info("epoch %d: %s", row["epoch"], ", ".join(f"{k}={row[k]:.4g}" for k in CSV_COLUMNS[2:]))

    try:
        res = train(splits["train"], cfg.train, splits["val"], on_epoch=on_epoch, log_every=args.log_every)
    except NumericError as exc:
        write_manifest(out, "train", cfg, {"data": str(args.data), "failed": str(exc), "term": exc.op,
                                           "step": exc.step})
        raise
    save_checkpoint(out / "model.ckpt", res.model, cfg.train, {"seed": cfg.resolved_seed()})
    extra = {"data": str(Path(args.data).resolve()), "wall_time_s": res.wall_time, "unstable": res.unstable,
             "final": rows[-1] if rows else {}}
    data_manifest = Path(args.data) / "manifest.json"
    if data_manifest.exists():
        extra["data_manifest"] = json.loads(data_manifest.read_text())
    write_manifest(out, "train", cfg, extra)
    if not args.no_plots:
        from .plotting import plot_history

        plot_history(rows, out / "history.png")
    last = rows[-1]
    print(f"trained {cfg.train.steps} steps in {res.wall_time:.1f}s: val AP50 {last['val_ap50']:.3f}, "
          f"val median angle error {last['val_median_angle_err_deg']:.2f} deg")
    return EXIT_OK


def _predict_chunk(payload):
    ckpt, scenes, thr, nms = payload
    from .train import load_checkpoint

    model, tc, _ = load_checkpoint(ckpt)
    return collect_predictions(model, scenes, tc.coder, thr, nms)


def cmd_eval(args) -> int:
    from .train import load_checkpoint

    cfg = base_config(args)
    thr = args.score_threshold if args.score_threshold is not None else cfg.eval.score_threshold
    nms = args.nms_iou if args.nms_iou is not None else cfg.eval.nms_iou
    model, tc, meta = load_checkpoint(args.checkpoint)
    scenes = load_dataset(Path(args.data) / f"{args.split}.bin")
    out = prepare_out(args.out, args.force)
    if args.workers > 1 and len(scenes) > 1:
        chunks = np.array_split(np.arange(len(scenes)), args.workers)
        payloads = [(args.checkpoint, [scenes[i] for i in c], thr, nms) for c in chunks if len(c)]
        with ProcessPoolExecutor(args.workers) as pool:
            parts = list(pool.map(_predict_chunk, payloads))
        dets = [d for p in parts for d in p[0]]
        readouts = [r for p in parts for r in p[1]]
    else:
        dets, readouts = collect_predictions(model, scenes, tc.coder, thr, nms)
    rep = build_report(scenes, dets, readouts)
    rep.to_csv(out / "report.csv")
    rep.to_json(out / "report.json")
    errs = [
        {"scene": i, "object": j, "shape_kind": o.shape_kind, "theta_sym": o.theta_sym, "pred": float(a)}
        for i, (s, r) in enumerate(zip(scenes, readouts)) for j, (o, a) in enumerate(zip(s.objects, r))
    ]
    from .evaluate import angle_error

    for e in errs:
        e["err_deg"] = angle_error(e["pred"], e["theta_sym"])
    write_rows(out / "angles.csv", errs, ("scene", "object", "shape_kind", "theta_sym", "pred", "err_deg"))
    rendered = []
    if args.render:
        from .plotting import render_detections

        rdir = out / "renders"
        rdir.mkdir(exist_ok=True)
        for i, s in enumerate(scenes[:args.render]):
            gts = [o.rbox for o in s.objects]
            rendered.append(render_detections(s.image, gts, [b for b, _ in dets[i]], rdir / f"scene_{i:04d}",
                                              args.render_format))
    if not args.no_plots:
        from .plotting import plot_angle_errors

        plot_angle_errors([e["err_deg"] for e in errs], out / "angle_errors.png")
    write_manifest(out, "eval", cfg, {"checkpoint": str(Path(args.checkpoint).resolve()),
                                      "data": str(Path(args.data).resolve()), "split": args.split,
                                      "score_threshold": thr, "nms_iou": nms, "train_config": tc.to_dict(),
                                      "renders": [p.name for p in rendered]})
    print(f"AP50 {rep.ap50:.3f}  AP75 {rep.ap75:.3f}  median angle error {rep.median_angle_err_deg:.2f} deg  "
          f"({rep.n_objects} objects)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import CASES, TOLERANCE, run_suite

    seed = base_config(args).resolved_seed()
    worst = run_suite(args.points, seed)
    failed = False
    print(f"{'loss':<12}{'worst rel. error':>18}  status")
    for name in CASES:
        ok = worst[name] < TOLERANCE
        failed |= not ok
        print(f"{name:<12}{worst[name]:>18.3e}  {'pass' if ok else 'FAIL'}")
    if args.out:
        write_rows(args.out, [{"loss": k, "worst_rel_error": v, "pass": v < TOLERANCE} for k, v in worst.items()],
                   ("loss", "worst_rel_error", "pass"))
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_sweep(args) -> int:
    from .sweep import VARIANTS, VARIANTS_BY_NAME, run_variant, write_report

    cfg = override_train(base_config(args), args)
    names = args.variants.split(",") if args.variants else [v.name for v in VARIANTS]
    unknown = [n for n in names if n not in VARIANTS_BY_NAME]
    if unknown:
        raise UsageError(f"unknown sweep variants {unknown}; choose from {sorted(VARIANTS_BY_NAME)}")
    out = prepare_out(args.out, args.force)
    if args.data:
        splits = load_splits(args.data)
    else:
        seed = cfg.resolved_seed()
        sizes = {"train": cfg.data.n_train, "val": cfg.data.n_val, "test": cfg.data.n_test}
        splits = {s: generate_dataset(cfg.synth, n, split_seed(seed, s), workers=args.workers)
                  for s, n in sizes.items()}
    rows = []
    for name in names:
        logger.info("sweep variant %s", name)
        res = run_variant(VARIANTS_BY_NAME[name], cfg, splits["train"], splits["val"], splits["test"])
        rows.append(res["row"])
        write_report(rows, out, plot=False)
    paths = write_report(rows, out, plot=not args.no_plots)
    write_manifest(out, "sweep", cfg, {"variants": names, "data": args.data, "report": {k: p.name for k, p in paths.items()}})
    for r in rows:
        print(f"{r['variant']:<14} AP50 {r['ap50']:.3f}  median angle error {r['median_angle_err_deg']:6.2f} deg  "
              f"L_box {r['final_L_box']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="symbox", description="Symmetry-aware oriented-box learning on synthetic scenes.")
    p.add_argument("--version", action="version", version=f"symbox {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON run config (flags override it)")
        sp.add_argument("--seed", type=int, help="seed; falls back to the config, then $SYMBOX_SEED")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
            sp.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    def train_flags(sp):
        sp.add_argument("--steps", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--ss-only", action="store_true", help="mask the WS box and center-ness terms")
        sp.add_argument("--coder", choices=("psc", "none"))
        sp.add_argument("--lambda", dest="lambda_flp", type=float, help="flip-consistency weight")
        sp.add_argument("--mu-ss", type=float, help="weight of the SS branch")
        sp.add_argument("--box-loss", choices=("circum_iou", "hbox_iou"))
        sp.add_argument("--padding", choices=("reflection", "zeros"))
        sp.add_argument("--rr", dest="rr_augment", action="store_true", help="random-rotation augmentation")
        sp.add_argument("--multiplex", action="store_true", help="one of flip/rotate view per step")
        sp.add_argument("--no-plots", action="store_true")

    g = sub.add_parser("gen", help="generate train/val/test splits")
    common(g)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--sample-pct", type=float, help="keep this percentage of the train split")
    g.add_argument("--noise-sigma", type=float, help="HBox annotation noise on the train split")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory from 'gen'")
    t.add_argument("--log-every", type=int, default=0)
    train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--score-threshold", type=float)
    e.add_argument("--nms-iou", type=float)
    e.add_argument("--render", type=int, default=0, metavar="N", help="render the first N images")
    e.add_argument("--render-format", choices=("auto", "png", "ppm"), default="auto")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    common(gc, out=False)
    gc.add_argument("--points", type=int, default=100)
    gc.add_argument("--out", help="optional CSV file for the table")
    gc.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", help="run the ablation grid")
    common(s)
    s.add_argument("--data", help="dataset directory (generated on the fly when omitted)")
    s.add_argument("--variants", help="comma-separated subset of variants")
    s.add_argument("--workers", type=int, default=1)
    train_flags(s)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError, InvalidArgumentError) as exc:
        print(f"symbox: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        where = f" (term {exc.op}, step {exc.step})" if exc.step is not None else ""
        print(f"symbox: numeric failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError) as exc:
        print(f"symbox: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
