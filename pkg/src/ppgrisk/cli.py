"""Command-line front end.

Subcommands chain the pipeline end to end on a single JSON run config:

    ppgrisk simulate --config run.json
    ppgrisk train    --config run.json
    ppgrisk fit      --config run.json [--models dls,metadata]
    ppgrisk evaluate --config run.json [--margin 0.025]
    ppgrisk report   --config run.json

Exit codes: 0 success, 2 validation error, 3 missing upstream artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from .errors import DependencyError, NumericalError, ValidationError
from .pipeline import (
    cmd_evaluate,
    cmd_fit,
    cmd_report,
    cmd_simulate,
    cmd_train,
    load_run_config,
)

EXIT_VALIDATION = 2
EXIT_DEPENDENCY = 3
EXIT_NUMERICAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ppgrisk",
        description="PPG-based ten-year cardiovascular risk pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "train", "fit", "evaluate", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--models", default=None, help="comma-separated model list override")
        p.add_argument("--margin", type=float, default=None, help="non-inferiority margin override")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "out": args.out,
        "models": args.models,
        "margin": args.margin,
    }
    try:
        cfg = load_run_config(args.config, overrides)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "fit":
            cmd_fit(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        elif args.command == "report":
            sys.stdout.write(cmd_report(cfg))
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":
    sys.exit(main())
