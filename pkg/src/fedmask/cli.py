"""Command line entry point: ``fedmask run|compare|gen-data``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .data import IDXFormatError, generate_blobs, write_idx
from .harness import compare_runs, emit_metrics, format_summary, run_experiment

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _run(args) -> int:
    cfg = load_config(Path(args.config))
    overrides = {}
    if args.rounds is not None:
        overrides["rounds"] = args.rounds
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        cfg = cfg.replace(**overrides)
    fmt = args.format or cfg.format
    out = args.out or cfg.output or f"{cfg.name}.{fmt}"
    path = emit_metrics(run_experiment(cfg), fmt, out)
    print(f"wrote {path}")
    return EXIT_OK


def _compare(args) -> int:
    cfgs = [load_config(Path(p)) for p in args.configs]
    rows = compare_runs(cfgs, axes=tuple(a for a in args.axes.split(",") if a))
    print(format_summary(rows))
    return EXIT_OK


def _gen_data(args) -> int:
    rows, cols = args.rows, args.cols
    full = generate_blobs(args.classes, args.per_class + args.test_per_class, rows * cols,
                          args.spread, args.seed, (rows, cols))
    per = args.per_class + args.test_per_class
    within = np.arange(len(full)) % per
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(full.subset(np.flatnonzero(within < args.per_class)),
              out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte")
    write_idx(full.subset(np.flatnonzero(within >= args.per_class)),
              out / "test-images-idx3-ubyte", out / "test-labels-idx1-ubyte")
    print(f"wrote IDX files to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmask", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and write per-round metrics")
    run.add_argument("config")
    run.add_argument("--rounds", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--out")
    run.add_argument("--format", choices=("csv", "json"))
    run.set_defaults(func=_run)

    cmp_ = sub.add_parser("compare", help="run several configs and tabulate final accuracy")
    cmp_.add_argument("configs", nargs="+")
    cmp_.add_argument("--axes", default="strategy,alpha",
                      help="comma-separated config keys the runs may differ in")
    cmp_.set_defaults(func=_compare)

    gen = sub.add_parser("gen-data", help="write a synthetic image-blob dataset as IDX files")
    gen.add_argument("--classes", type=int, default=10)
    gen.add_argument("--per-class", type=int, default=200)
    gen.add_argument("--test-per-class", type=int, default=100)
    gen.add_argument("--rows", type=int, default=8)
    gen.add_argument("--cols", type=int, default=8)
    gen.add_argument("--spread", type=float, default=0.5)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out-dir", default="data")
    gen.set_defaults(func=_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IDXFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        # sweep/argument validation
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
