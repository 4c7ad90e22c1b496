"""Command-line entry point: generate, train, eval, predict, benchmark, sweep."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import ContractError, ShapeError, no_grad
from .config import PRESETS, RunConfig, dump_config, load_config
from .evaluation import complexity_csv, count_macs, evaluate, stack_features, sweep_csv, threshold_sweep
from .model import CheckpointError, ConfigError, QueryModel, load_checkpoint, save_checkpoint
from .synth import FormatError, GenerationError, SequenceSample, generate_split, read_dataset, write_dataset
from .train import train_model

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3

SPLIT_NAMES = ("train", "val", "test")
CHECKPOINT_NAME = "best.ckpt"
LOG_NAME = "train_log.jsonl"
MANIFEST_NAME = "manifest.json"

log = logging.getLogger("repquery")


def _split_path(root: Path, name: str) -> Path:
    return root / f"{name}.trc"


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, optim=replace(cfg.optim, epochs=args.epochs))
    if args.out is not None:
        cfg = replace(cfg, out_dir=str(args.out))
    return cfg


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def _check_fit(model: QueryModel, samples: list[SequenceSample]) -> None:
    cfg = model.config
    for i, s in enumerate(samples):
        if s.features.shape != (cfg.T, cfg.C_in):
            raise ConfigError("C_in", f"sequence {i} has shape {s.features.shape}, checkpoint expects ({cfg.T}, {cfg.C_in})")


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("alphas", f"not a comma-separated float list: {text!r}") from None


def _parse_ints(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("lengths", f"not a comma-separated integer list: {text!r}") from None
    if not values:
        raise ConfigError("lengths", "at least one length required")
    bad = [v for v in values if v < 1]
    if bad:
        raise ConfigError("lengths", f"lengths must be positive, got {bad[0]}")
    return values


# -- commands -------------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.splits
    splits = generate_split(cfg.generator, s.train, s.val, s.test)
    counts = {}
    for name, samples in zip(SPLIT_NAMES, splits):
        write_dataset(samples, _split_path(out, name))
        counts[name] = len(samples)
    _write_json(out / "data_manifest.json", {"config": cfg.to_dict(), "counts": counts, "files": {n: f"{n}.trc" for n in SPLIT_NAMES}})
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    data = Path(args.data) if args.data else out
    train_set = read_dataset(_split_path(data, "train"))
    val_path = _split_path(data, "val")
    val_set = read_dataset(val_path) if val_path.exists() else []
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / LOG_NAME
    t0 = time.perf_counter()
    with log_path.open("w") as fh:

        def on_epoch(row: dict) -> None:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()
            log.info("epoch %d loss %.4f val_obo %.3f val_mae %.3f", row["epoch"], row["total"], row.get("val_obo", float("nan")), row.get("val_mae", float("nan")))

        result = train_model(cfg.model, cfg.loss, cfg.optim, train_set, val_set, on_epoch=on_epoch)
    save_checkpoint(result.model, out / CHECKPOINT_NAME, step=result.best_epoch)
    _write_json(
        out / MANIFEST_NAME,
        {
            "config": cfg.to_dict(),
            "data": {"dir": str(data), "train": len(train_set), "val": len(val_set)},
            "best_epoch": result.best_epoch,
            "best_val": None if result.best_val is None else {"obo": result.best_val[0], "mae": result.best_val[1]},
            "steps": result.steps,
        },
    )
    log.info("trained %d epochs in %.1fs; best epoch %d", cfg.optim.epochs, time.perf_counter() - t0, result.best_epoch)
    print(str(out / CHECKPOINT_NAME))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    samples = read_dataset(args.data)
    _check_fit(model, samples)
    report = evaluate(model, samples, alpha=args.alpha, normalize=args.normalize)
    _emit(report.to_csv(), args.out)
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    samples = read_dataset(args.data)
    _check_fit(model, samples)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sequence", "query", "prob", "midpoint", "duration", "gt_count", "gt_cycles"])
    feats = stack_features(samples)
    for start in range(0, len(samples), 32):
        with no_grad():
            final = model(feats[start : start + 32]).final
        for b in range(final.probs.shape[0]):
            s = samples[start + b]
            gt = ";".join(f"{c.midpoint:.6f}:{c.duration:.6f}" for c in s.cycles)
            for q in range(final.probs.shape[1]):
                w.writerow(
                    [start + b, q, f"{final.probs.data[b, q]:.6f}", f"{final.midpoints.data[b, q]:.6f}", f"{final.durations.data[b, q]:.6f}", s.true_count, gt]
                )
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _resolve(args)
    lengths = _parse_ints(args.lengths)
    records = [count_macs(cfg.model, t) for t in lengths]
    if args.timing:
        for rec in records:
            mcfg = replace(cfg.model, T=rec.T, Q=min(cfg.model.Q, rec.T))
            model = QueryModel(mcfg, seed=cfg.optim.seed)
            x = np.random.default_rng(0).normal(size=(1, rec.T, mcfg.C_in))
            t0 = time.perf_counter()
            with no_grad():
                model(x)
            log.warning("T=%d forward %.1f ms (informational)", rec.T, 1e3 * (time.perf_counter() - t0))
    text = complexity_csv(records)
    if args.out is not None:
        _emit(text, Path(args.out) / "complexity.csv")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    samples = read_dataset(args.data)
    _check_fit(model, samples)
    alphas = _parse_floats(args.alphas)
    _emit(sweep_csv(threshold_sweep(model, samples, alphas)), args.out)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON run config overlaid on the preset")
    p.add_argument("--preset", choices=PRESETS, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="output directory")


def _model_io(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset file")
    p.add_argument("--out", type=Path, default=None, help="output file (stdout when omitted)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repquery", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write train/val/test dataset files")
    _common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train and keep the best-validation checkpoint")
    _common(p)
    p.add_argument("--data", type=Path, default=None, help="directory with train.trc and val.trc (default: --out)")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metric CSV for a checkpoint on a dataset")
    _model_io(p)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--normalize", choices=("gt", "pred"), default="gt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-query prediction dump")
    _model_io(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("benchmark", help="multiply-accumulate counts per sequence length")
    _common(p)
    p.add_argument("--lengths", default="64,128,256,512")
    p.add_argument("--timing", action="store_true", help="also time one forward pass per length")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("sweep", help="metrics over confidence thresholds")
    _model_io(p)
    p.add_argument("--alphas", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
