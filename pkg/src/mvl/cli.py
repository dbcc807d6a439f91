"""Command line entry point: ``mvl <subcommand> [--config FILE] [--out DIR]``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config

SUBCOMMANDS = ("train", "sweep-bias-variance", "density", "demo-ae", "cd1-compare")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvl", description="Minimum-velocity score matching experiments")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment config file (INI)")
        sp.add_argument("--out", help="output directory (default: $MVL_OUTPUT_ROOT/<subcommand>)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--quiet", action="store_true")
        if name == "density":
            sp.add_argument("--model", help="trained model JSON (skips training)")
            sp.add_argument("--resolution", type=int, help="grid nodes (S^1) or polar rows (S^2)")
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage to stderr; bad flags count as config errors
        return 0 if exc.code == 0 else 1
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    try:
        if args.config:
            cfg = load_config(args.config)
        elif args.command == "density" and args.model:
            cfg = ExperimentConfig(kind="density")
        else:
            raise ConfigError(f"{args.command} needs --config")
        cfg.kind = args.command
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.train.seed = args.seed
            cfg.ae.seed = args.seed
        if args.command == "density" and args.model and not Path(args.model).is_file():
            raise ConfigError(f"model file not found: {args.model}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    from . import experiments

    out = cfg.output_dir(args.out)
    try:
        if args.command == "density":
            summary = experiments.run_density(cfg, out, args.model, args.resolution, log)
        else:
            summary = experiments.RUNNERS[args.command](cfg, out, log)
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures: divergence, chart errors, IO
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(f"==== {args.command} -> {out}")
    print(json.dumps(summary, indent=1, sort_keys=True, default=float))
    print("====")
    return 0


if __name__ == "__main__":
    sys.exit(main())
