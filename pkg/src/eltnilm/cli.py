"""``elt``: command-line entry point for the NILM pipeline.

Exit codes:

    0  success
    1  unexpected internal error
    2  configuration or usage error
    3  data error (malformed or missing input data)
    4  numeric failure (NaN or infinity during training or evaluation)
    5  I/O error (unreadable or unwritable file)

Log verbosity comes from the ``ELT_LOG_LEVEL`` environment variable
(``WARNING`` by default).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from eltnilm import bench
from eltnilm.checkpoint import load_checkpoint
from eltnilm.config import RunConfig, validate_config, write_run_config
from eltnilm.data import (
    DEFAULT_INPUT_LEN,
    SAMPLE_PERIOD,
    WindowSet,
    align_resample,
    fit_stats,
    house_segments,
    load_cache,
    load_channel,
    load_manifest,
    resample_mains,
    save_cache,
)
from eltnilm.errors import ConfigError, DataError, EltError, NumericError
from eltnilm.evaluation import denormalize, report, threshold_for, write_reports, write_trace
from eltnilm.model import ELTransformer, with_overrides
from eltnilm.synth import load_scenario, write_scenario_dataset
from eltnilm.training import train

logger = logging.getLogger("eltnilm")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

RESOLVED_NAME = "config.resolved.ini"
SWEEP_GRIDS = {
    "local_heads": ("n_local", (0, 1, 2, 3, 4)),
    "window": ("l_win", (10, 15, 20, 25, 30)),
}


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit 2."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_invocation(out_dir: Path, command: str, args: dict) -> None:
    """Record the resolved arguments of a config-less command beside its outputs."""
    parser = configparser.ConfigParser()
    parser[command] = {k: str(v) for k, v in args.items() if v is not None}
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / RESOLVED_NAME, "w") as fh:
        parser.write(fh)


def _cache_path(data: str, name: str) -> Path:
    p = Path(data)
    return p / name if p.is_dir() else p


# subcommands


def cmd_synth(args) -> int:
    scenario = load_scenario(args.config)
    manifest = write_scenario_dataset(scenario, args.out)
    print(manifest)
    return EXIT_OK


def preprocess(manifest_path, appliance: str, out_dir, input_len: int = DEFAULT_INPUT_LEN,
               period: int = SAMPLE_PERIOD) -> dict:
    """Build ``train.cache`` (and ``test.cache`` if the manifest has test houses).

    Normalisation statistics are fitted on training houses only and stored
    in both caches. Returns the written paths by role.
    """
    manifest = load_manifest(manifest_path)
    threshold_for(appliance, manifest.thresholds)
    segs = {role: [s for h in manifest.by_role(role) for s in house_segments(h, appliance, period)]
            for role in ("train", "test")}
    if not segs["train"]:
        raise DataError(f"{manifest_path}: no training segments for {appliance!r}")
    mains_stats, app_stats = fit_stats(segs["train"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"appliance": appliance, "thresholds": manifest.thresholds, "period": period}
    written = {}
    for role, segments in segs.items():
        if not segments:
            continue
        path = out / f"{role}.cache"
        save_cache(path, segments, mains_stats, app_stats, input_len, meta={**meta, "role": role})
        written[role] = path
        logger.info("%s: %d segments", path, len(segments))
    return written


def cmd_preprocess(args) -> int:
    written = preprocess(args.manifest, args.appliance, args.out, args.input_len, args.period)
    _write_invocation(Path(args.out), "preprocess", {
        "manifest": Path(args.manifest).resolve(), "appliance": args.appliance,
        "input_len": args.input_len, "period": args.period,
    })
    for p in written.values():
        print(p)
    return EXIT_OK


def _load_train_cache(data: str, cfg: RunConfig):
    cache = load_cache(_cache_path(data, "train.cache"))
    if cache.input_len != cfg.model.input_len:
        raise ConfigError(
            f"input_len mismatch: config has {cfg.model.input_len}, cache was built with {cache.input_len}"
        )
    appliance = cache.meta.get("appliance")
    if cfg.data.appliance and appliance and cfg.data.appliance != appliance:
        raise ConfigError(f"appliance mismatch: config has {cfg.data.appliance!r}, cache holds {appliance!r}")
    return cache


def run_training(cfg: RunConfig, cache, out_dir=None, model_cfg=None):
    model = ELTransformer(model_cfg or cfg.model, seed=cfg.seed)
    meta = {
        "appliance": cache.meta.get("appliance"),
        "thresholds": cache.meta.get("thresholds", {}),
        "period": cache.meta.get("period", SAMPLE_PERIOD),
        "mains_stats": cache.mains_stats.to_dict(),
        "appliance_stats": cache.appliance_stats.to_dict(),
    }
    result = train(model, cache.windows(cfg.data.window_stride), cfg.train_config(), out_dir, checkpoint_meta=meta)
    return model, result


def cmd_train(args) -> int:
    cfg = validate_config(args.config)
    out = Path(args.out)
    write_run_config(out / RESOLVED_NAME, cfg)
    cache = _load_train_cache(args.data, cfg)
    _, result = run_training(cfg, cache, out)
    print(f"best epoch {result.best_epoch} val_mse {result.best_val_mse:.6g}: {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval: missing required flag --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    cache = load_cache(_cache_path(args.data, "test.cache"))
    appliance = args.appliance or ckpt.appliance or cache.meta.get("appliance")
    if not appliance:
        raise ConfigError("eval: missing required flag --appliance")
    if ckpt.appliance and appliance != ckpt.appliance:
        raise ConfigError(f"checkpoint was trained for {ckpt.appliance!r}, not {appliance!r}")
    if cache.input_len != ckpt.model.cfg.input_len:
        raise ConfigError(f"input_len mismatch: checkpoint {ckpt.model.cfg.input_len}, cache {cache.input_len}")
    thresholds = {**cache.meta.get("thresholds", {}), **ckpt.meta.get("thresholds", {})}
    if args.threshold is not None:
        thresholds[appliance] = args.threshold
    # statistics always come from the checkpoint, i.e. from training data
    windows = WindowSet(cache.segments, ckpt.mains_stats, ckpt.appliance_stats, cache.input_len, args.stride)
    rep, pred = report(ckpt.model, windows, appliance, ckpt.appliance_stats, thresholds, args.batch_size)
    out = Path(args.out)
    write_reports(out, [rep])
    if args.trace:
        write_trace(out / "trace.csv", windows.label_times(), pred, windows.truth_watts())
    _write_invocation(out, "eval", {
        "checkpoint": Path(args.checkpoint).resolve(), "data": Path(args.data).resolve(),
        "appliance": appliance, "threshold": threshold_for(appliance, thresholds), "stride": args.stride,
    })
    print(f"{appliance}: MAE {rep.mae:.3f} W  F1 {rep.f1:.4f}  MCC {rep.mcc:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.mains_stats is None or ckpt.appliance_stats is None:
        raise DataError(f"{args.checkpoint}: checkpoint carries no normalisation statistics")
    period = int(ckpt.meta.get("period", SAMPLE_PERIOD))
    mains = load_channel(args.input, "mains")
    if args.truth:
        segments = align_resample(mains, load_channel(args.truth, ckpt.appliance or "appliance"), period)
    else:
        segments = resample_mains(mains, period)
    windows = WindowSet(segments, ckpt.mains_stats, ckpt.appliance_stats, ckpt.model.cfg.input_len)
    if len(windows) == 0:
        raise DataError(f"{args.input}: no contiguous run of {ckpt.model.cfg.input_len} samples")
    pred = denormalize(ckpt.model.predict_windows(windows, batch_size=args.batch_size), ckpt.appliance_stats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace(out, windows.label_times(), pred, windows.truth_watts() if args.truth else None)
    _write_invocation(out.parent, "predict", {
        "checkpoint": Path(args.checkpoint).resolve(), "input": Path(args.input).resolve(),
        "truth": Path(args.truth).resolve() if args.truth else None, "out": out.resolve(),
    })
    print(out)
    return EXIT_OK


def cmd_bench(args) -> int:
    kernels = [k.strip() for k in args.kernels.split(",") if k.strip()]
    for k in kernels:
        if k not in bench.KERNELS:
            raise ConfigError(f"unknown kernel {k!r}; choose from {', '.join(bench.KERNELS)}")
    try:
        points = []
        for k in kernels:
            points.extend(bench.time_kernel(k, args.lengths, args.d_head, args.l_win, args.reps, args.warmup, args.seed))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bench.write_csv(out, points)
    _write_invocation(out.parent, "bench", {
        "lengths": ",".join(map(str, args.lengths)), "kernels": ",".join(kernels), "d_head": args.d_head,
        "l_win": args.l_win, "reps": args.reps, "warmup": args.warmup, "seed": args.seed,
    })
    for k in kernels:
        pts = [p for p in points if p.kernel == k]
        ok = [p for p in pts if p.error is None]
        if len(ok) >= 3:
            slope, _ = bench.fit_points(pts, "time")
            count_slope, _ = bench.fit_points(pts, "multiplies")
            print(f"{k}: time exponent {slope:.3f}, multiply exponent {count_slope:.3f}")
    return EXIT_OK


SWEEP_FIELDS = ["grid", "n_local", "l_win", "best_epoch", "best_val_mse", "mae", "f1", "mcc"]


def cmd_sweep(args) -> int:
    cfg = validate_config(args.config)
    key, values = SWEEP_GRIDS[args.grid]
    if args.values:
        values = tuple(args.values)
    data = args.data
    out = Path(args.out)
    work = out.parent / f"{out.stem}_runs"
    if data is None:
        if not cfg.data.manifest or not cfg.data.appliance:
            raise ConfigError("sweep: pass --data or set [data] manifest and appliance")
        data = work / "data"
        preprocess(cfg.data.manifest, cfg.data.appliance, data, cfg.model.input_len)
    write_run_config(out.parent / RESOLVED_NAME, cfg)
    cache = _load_train_cache(str(data), cfg)
    test_path = _cache_path(str(data), "test.cache") if Path(data).is_dir() else None
    test = load_cache(test_path) if test_path is not None and test_path.exists() else None
    appliance = cache.meta.get("appliance") or cfg.data.appliance
    thresholds = cache.meta.get("thresholds", {})
    rows = []
    for value in values:
        model_cfg = with_overrides(cfg.model, **{key: value})
        run_cfg = replace(cfg, model=model_cfg)
        model, result = run_training(run_cfg, cache, work / f"{key}_{value}", model_cfg)
        row = {"grid": args.grid, "n_local": model_cfg.n_local, "l_win": model_cfg.l_win,
               "best_epoch": result.best_epoch, "best_val_mse": repr(result.best_val_mse),
               "mae": "", "f1": "", "mcc": ""}
        if test is not None:
            rep, _ = report(model, test.windows(cfg.data.eval_stride), appliance, cache.appliance_stats, thresholds)
            row.update(mae=repr(rep.mae), f1=repr(rep.f1), mcc=repr(rep.mcc))
        rows.append(row)
        logger.info("sweep %s=%s done", key, value)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(out)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = validate_config(args.config)
    if args.out:
        write_run_config(args.out, cfg)
    print("ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="elt", description="Energy disaggregation with a linear/local attention transformer.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic scenario dataset")
    p.add_argument("--config", required=True, help="scenario INI file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="resample, normalise and cache windows")
    p.add_argument("--manifest", required=True)
    p.add_argument("--appliance", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--input-len", type=int, default=DEFAULT_INPUT_LEN)
    p.add_argument("--period", type=int, default=SAMPLE_PERIOD)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a window cache")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="preprocess output directory or a .cache file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    # --checkpoint is checked by hand so the message names the flag
    p = sub.add_parser("eval", help="score a checkpoint on held-out data")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--appliance")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, help="override the on-threshold in watts")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--trace", action="store_true", help="also write trace.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict appliance power for a mains CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="appliance CSV to include as a truth column")
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="time attention kernels against sequence length")
    p.add_argument("--lengths", type=_int_list, default=list(bench.DEFAULT_LENGTHS))
    p.add_argument("--out", required=True)
    p.add_argument("--kernels", default=",".join(bench.KERNELS))
    p.add_argument("--d-head", type=int, default=64)
    p.add_argument("--l-win", type=int, default=bench.BENCH_L_WIN)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="ablation grid over local heads or window size")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, choices=sorted(SWEEP_GRIDS))
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="preprocess output directory; defaults to the config's [data] manifest")
    p.add_argument("--values", type=_int_list, help="override the grid values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="check a run config and optionally write it resolved")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("ELT_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        for line in getattr(exc, "errors", None) or [str(exc)]:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EltError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
