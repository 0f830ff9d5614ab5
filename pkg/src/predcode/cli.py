"""Command-line entry point: one subcommand per experiment kind.

    predcode kalman-compare --seed 3 --out runs/kf.jsonl
    predcode train --config mnist.json --override training.epochs=5
"""

from __future__ import annotations

import argparse
import sys

from .config import KINDS, ConfigError, ExperimentConfig
from .experiments import EXIT_INVALID, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="predcode", description="Predictive coding experiment runner.")
    sub = parser.add_subparsers(dest="kind", required=True, metavar="KIND")
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} suite")
        p.add_argument("--config", help="JSON experiment configuration")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config)")
        p.add_argument("--out", help="metrics output path, one JSON record per line")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a dotted config key, e.g. training.lr=0.1 (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    def log(msg):
        print(f"predcode: {msg}", file=sys.stderr)

    try:
        top = {"kind": args.kind, "seed": args.seed, "out": args.out}
        if args.config:
            cfg = ExperimentConfig.load(args.config, args.override, **top)
        else:
            cfg = ExperimentConfig.from_dict({}, args.override, **top)
    except ConfigError as exc:
        log(f"invalid configuration: {exc}")
        return EXIT_INVALID
    return run_experiment(cfg, log=log)


if __name__ == "__main__":
    raise SystemExit(main())
