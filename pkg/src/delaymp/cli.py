"""Command-line entry point.

One subcommand per experiment kind.  Exit codes: 0 the experiment ran and its
PASS rule held, 1 the PASS rule failed, 2 configuration error, 3 numerical
error.  The default output directory comes from --out, then the config, then
the DELAYMP_OUT environment variable, then ./delaymp-out/<kind>.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import (
    EXPERIMENT_KINDS,
    ExperimentConfig,
    apply_override,
    default_config,
    load_config,
)
from .errors import ConfigurationError, DelaympError
from .experiments import run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="delaymp",
        description="Experiments for stochastic optimal control with pointwise delay.",
    )
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the noise seed")
        p.add_argument("--paths", type=int, help="override the path count")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted config override, e.g. grid.steps_per_delay=32",
        )
    return parser


def _resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        config = load_config(args.config, kind=args.kind)
    else:
        config = default_config(args.kind)
    for assignment in args.override:
        config = apply_override(config, assignment)
    if args.seed is not None:
        config = apply_override(config, f"seed={args.seed}")
    if args.paths is not None:
        config = apply_override(config, f"n_paths={args.paths}")
    return config


def _resolve_outdir(args, config: ExperimentConfig) -> Path:
    if args.out is not None:
        return args.out
    if config.output_dir:
        return Path(config.output_dir)
    env = os.environ.get("DELAYMP_OUT")
    if env:
        return Path(env) / config.kind
    return Path("delaymp-out") / config.kind


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _resolve_config(args)
        outdir = _resolve_outdir(args, config)
    except ConfigurationError as exc:
        print(f"delaymp: config error: {exc}", file=sys.stderr)
        return 2
    try:
        outcome = run_experiment(config, outdir)
    except ConfigurationError as exc:
        print(f"delaymp: config error: {exc}", file=sys.stderr)
        return 2
    except DelaympError as exc:
        print(f"delaymp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    status = "PASS" if outcome.passed else "FAIL"
    print(f"{config.kind}: {status} (artifacts in {outdir})")
    return 0 if outcome.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
