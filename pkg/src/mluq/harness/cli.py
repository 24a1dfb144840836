"""Command line front end: one subcommand per experiment stage.

Exit codes: 0 on success, 1 when a validation stage reports a failed
check, 2 for configuration or file integrity problems, 3 for numerical
failures.
"""

import argparse
import dataclasses
import logging
import sys

import numpy as np

from ..errors import (ConfigurationError, DomainError, IntegrityError,
                      NumericalError)
from . import experiments
from .config import ExperimentConfig, load_config, save_config

_STAGES = {
    "kle": experiments.run_kle,
    "offline": experiments.run_offline,
    "forward": experiments.run_forward,
    "mlmc": experiments.run_mlmc,
    "mc": experiments.run_mc,
    "table1": experiments.run_table1,
    "mlmcmc": experiments.run_mlmcmc,
    "toy-oracle": experiments.run_toy_oracle,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mluq",
        description="Multilevel estimators over a multiscale reduced-order "
                    "forward model hierarchy")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging")
    sub = parser.add_subparsers(dest="stage", required=True)
    for name, fn in _STAGES.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).splitlines()[0].rstrip("."))
        p.add_argument("--config", help="INI experiment file (defaults built in)")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--seed", type=int, help="prior seed override")
        p.add_argument("--workers", type=int, help="worker thread override")
    init = sub.add_parser("init", help="write the default configuration to a file")
    init.add_argument("path")
    return parser


def _configure(args):
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["prior_seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config


def _render(value):
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".6g")
    if isinstance(value, np.ndarray):
        return "[" + " ".join(format(float(v), ".4g")
                              for v in np.ravel(value)) + "]"
    if isinstance(value, (list, tuple)):
        return "(" + ", ".join(_render(v) for v in value) + ")"
    return str(value)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.stage == "init":
            save_config(ExperimentConfig(), args.path)
            print(f"wrote {args.path}")
            return 0
        config = _configure(args)
        summary = _STAGES[args.stage](config)
    except (ConfigurationError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    for key, value in summary.items():
        print(f"{key}: {_render(value)}")
    if not summary.get("all_passed", True):
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
