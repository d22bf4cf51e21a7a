"""Command line: ``stabtransport <experiment> <config.json> [-o DIR]``.

The exit status is 0 exactly when every asserted criterion of the run
passes, 1 when one fails and 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import EXPERIMENTS, ConfigError, parse_config
from .experiments import DecayViolation, run_experiment


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p = argparse.ArgumentParser(prog="stabtransport", description="Stabilised CG transport experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name, parents=[common], help=f"run the {name} experiment")
        s.add_argument("config", help="JSON config file")
        s.add_argument("-o", "--output-dir", help="override the output directory of the config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, args.command)
        if cfg.experiment != args.command:
            raise ConfigError(f"config is for experiment {cfg.experiment!r}, not {args.command!r}")
        report = run_experiment(cfg, args.output_dir)
    except (ConfigError, DecayViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for line in report.summary_lines():
        print(line)
    print("OK" if report.ok else "FAILED")
    return 0 if report.ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
