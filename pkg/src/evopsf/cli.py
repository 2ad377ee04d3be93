"""Command-line entry point: ``python -m evopsf <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .adaptation import InvariantViolation
from .model import ModelParameters
from .worldsim import ConfigurationError


def _config(path: str) -> harness.ExperimentConfig:
    return harness.ExperimentConfig.load(path)


def cmd_pretrain(args) -> int:
    config = _config(args.config)
    for key, path in harness.pretrain_all(config).items():
        print(f"{key}\t{path}")
    print(config.out_dir() / "pretrain_report.json")
    return 0


def cmd_run(args) -> int:
    config = _config(args.config)
    if args.workers:
        config.workers = args.workers
    rows = harness.run_experiment(config)
    print(f"{len(rows)} rows -> {config.out_dir() / 'metrics.csv'}")
    return 0


def cmd_ablate(args) -> int:
    config = _config(args.config)
    if args.workers:
        config.workers = args.workers
    table = harness.run_ablation(config)
    print(harness.render_ablation(table), end="")
    return 0


def cmd_report(args) -> int:
    print(harness.report(args.csv, args.plots), end="")
    return 0


def cmd_replay(args) -> int:
    total = 0
    for path in args.trace:
        n = harness.replay_trace(path)
        print(f"{path}\t{n} records ok")
        total += n
    return 0


def cmd_model_info(args) -> int:
    params = ModelParameters.load(args.checkpoint) if args.checkpoint else ModelParameters.initialize(args.seed)
    print(harness.model_info(params), end="")
    return 0


def cmd_init_config(args) -> int:
    config = harness.ExperimentConfig(suite=args.suite, output_dir=args.output_dir)
    text = config.dumps()
    if args.path == "-":
        sys.stdout.write(text)
    else:
        Path(args.path).write_text(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evopsf", description="Desk-scale planning-feedback adaptation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="pretrain (or reuse) the source checkpoints of a config")
    s.add_argument("config")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("run", help="run every suite x strategy x seed cell")
    s.add_argument("config")
    s.add_argument("--workers", type=int, default=0)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("ablate", help="four-variant ablation table")
    s.add_argument("config")
    s.add_argument("--workers", type=int, default=0)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="mean and std per cell from metrics CSV files")
    s.add_argument("csv", nargs="+")
    s.add_argument("--plots", default=None, help="directory for optional PNG bar charts")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("replay-trace", help="re-verify adaptation records offline")
    s.add_argument("trace", nargs="+")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("model-info", help="parameter counts per sub-module")
    s.add_argument("checkpoint", nargs="?")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_model_info)

    s = sub.add_parser("init-config", help="write a default config file")
    s.add_argument("path", nargs="?", default="-")
    s.add_argument("--suite", default="cross_region")
    s.add_argument("--output-dir", default="runs/default")
    s.set_defaults(func=cmd_init_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, ConfigurationError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
