"""Command-line entry point: ``pcamnet {gen,train,eval,ablate,gradcheck,bench}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError, ContractError, DataError, DimensionError, NumericError
from .gradcheck import run_suite
from .metrics import DEFAULT_SPACING, canonical_json, fmt
from .pcam import OpCounter, counted_affinity_logits, pcam_flops
from .segnet import Network
from .synthdata import SynthSpec, generate, read_dataset, write_dataset
from . import training

log = logging.getLogger("pcamnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

BENCH_SHAPES = [
    (64, 2, 48, 48, 16), (1, 2, 1, 1, 1), (2, 2, 4, 4, 4), (8, 2, 8, 8, 4), (16, 3, 8, 8, 8),
    (32, 2, 16, 16, 8), (8, 4, 12, 10, 6), (3, 5, 7, 5, 3), (64, 2, 24, 24, 8), (128, 2, 12, 12, 4),
]

# flag dest -> dotted RunConfig path
OVERRIDES = {
    "epochs": "training.epochs",
    "batch_size": "training.batch_size",
    "learning_rate": "training.learning_rate",
    "folds": "training.folds",
    "seed": "seed",
    "pcam_location": "network.pcam_location",
    "stages": "network.stages",
    "base_channels": "network.base_channels",
}


def _read_json(arg: str, what: str) -> dict:
    """``arg`` is either inline JSON or a path to a JSON file."""
    text = arg
    if not arg.lstrip().startswith("{"):
        try:
            text = Path(arg).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {what} {arg}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {what}: {exc}") from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_dict(_read_json(args.config, "config")) if args.config else RunConfig()
    over = {}
    for dest, path in OVERRIDES.items():
        v = getattr(args, dest, None)
        if v is not None:
            over[path] = None if v == "none" else v
    for item in getattr(args, "set", None) or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        over[key] = _parse_value(val)
    if over:
        try:
            cfg = cfg.replace(**over)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad override: {exc}") from exc
    return cfg


def _location(text: str):
    if text.lower() == "none":
        return "none"
    try:
        return int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected an integer or 'none'") from exc


def _load_samples(args, cfg: RunConfig):
    if args.data:
        samples, meta = read_dataset(args.data)
        spacing = tuple(meta[0].get("spacing", DEFAULT_SPACING))
        return samples, spacing
    return generate(cfg.data, cfg.sample_count), DEFAULT_SPACING


def _write(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
    except OSError as exc:
        raise DataError(f"cannot write {p}: {exc}") from exc


# ------------------------------------------------------------------ commands

def cmd_gen(args) -> int:
    spec = SynthSpec.from_dict(_read_json(args.spec, "spec")) if args.spec else SynthSpec()
    if args.seed is not None:
        spec = SynthSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    write_dataset(generate(spec, args.count), args.out, spec)
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def _train_one(cfg, tr, va, out: Path):
    use_pcam = cfg.network.pcam_location is not None
    res = training.train(cfg, tr, va, use_pcam=use_pcam)
    try:
        out.mkdir(parents=True, exist_ok=True)
        res.network.save(out / "checkpoint.pcam")
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    _write(out / "metrics.csv", res.history_csv())
    _write(out / "config.json", cfg.to_json())
    print(f"{out}: best epoch {res.best_epoch} val_dsc {fmt(res.best_val_dsc)}")
    return res


def cmd_train(args) -> int:
    cfg = load_config(args)
    samples, _ = _load_samples(args, cfg)
    out = Path(args.out or cfg.output_dir)
    k = cfg.training.folds
    if k == 1:
        _train_one(cfg, *training.split(samples, cfg.training.val_fraction), out)
    else:
        if k > len(samples):
            raise ConfigError(f"{k} folds need at least {k} samples")
        for i, (tr, va) in enumerate(training.folds(samples, k)):
            _train_one(cfg, tr, va, out / f"fold{i}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        net = Network.load(args.checkpoint)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc
    samples, meta = read_dataset(args.data)
    spacing = tuple(meta[0].get("spacing", DEFAULT_SPACING))
    use_pcam = net.config.pcam_location is not None and not args.no_pcam
    report = training.evaluate(net, samples, use_pcam=use_pcam, spacing=spacing)
    text = report.to_csv() if str(args.out).endswith(".csv") else report.to_json()
    _write(args.out, text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    samples, _ = _load_samples(args, cfg)
    tr, va = training.split(samples, cfg.training.val_fraction)
    rows = training.ablate(cfg, tr, va)
    if args.out:
        text = training.ablation_csv(rows) if str(args.out).endswith(".csv") else canonical_json(rows)
        _write(args.out, text)
    sys.stdout.write(training.ablation_csv(rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(seeds=args.seeds, network_coords=args.coords)
    failed = [r for r in results if not r.passed]
    worst = max(r.rel_error for r in results)
    for r in failed:
        print(f"FAIL {r.name} rel_error={r.rel_error:.3e}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed, max rel_error {worst:.3e}")
    return EXIT_NUMERIC if failed else EXIT_OK


def bench_rows(shapes=BENCH_SHAPES, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for C, N, H, W, S in shapes:
        counter = OpCounter()
        counted_affinity_logits(rng.standard_normal((C, H * W * S)), rng.standard_normal((N, C)), counter)
        formula = pcam_flops(C, H, W, S, N)
        rows.append({"C": C, "N": N, "H": H, "W": W, "S": S, "formula": formula,
                     "counted": counter.total, "ratio": counter.total / formula})
    return rows


def cmd_bench(args) -> int:
    shapes = BENCH_SHAPES
    if args.shape:
        shapes = [tuple(int(v) for v in s.split(",")) for s in args.shape]
        if any(len(s) != 5 for s in shapes):
            raise ConfigError("--shape expects C,N,H,W,S")
    rows = bench_rows(shapes)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ("C", "N", "H", "W", "S", "formula", "counted", "ratio")
    w.writerow(cols)
    for r in rows:
        w.writerow([r[c] for c in cols[:-1]] + [fmt(r["ratio"])])
    sys.stdout.write(buf.getvalue())
    return EXIT_OK if all(r["ratio"] == 1.0 for r in rows) else EXIT_NUMERIC


# -------------------------------------------------------------------- parser

def _config_flags(p):
    p.add_argument("--config", help="RunConfig JSON file or inline JSON")
    p.add_argument("--data", help="dataset directory (default: generate from the config)")
    p.add_argument("--out", help="output location")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pcam-location", type=_location)
    p.add_argument("--stages", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--set", action="append", metavar="PATH=VALUE",
                   help="override any config field, e.g. --set data.noise_sigma=0.1")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcamnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--spec", help="SynthSpec JSON file or inline JSON")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model")
    _config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="-", help="*.csv for CSV, otherwise JSON ('-' = stdout)")
    p.add_argument("--no-pcam", action="store_true", help="bypass the PCAM block")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every plug location and compare")
    _config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--coords", type=int, default=6, help="sampled coordinates per network parameter")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="affinity FLOP formula vs instrumented count")
    p.add_argument("--shape", action="append", metavar="C,N,H,W,S")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimensionError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
