"""Command-line entry point: ``sdbench {synth,train,downscale,evaluate,compare,run}``.

Flags override the matching keys of the JSON ``--config`` file. Exit status
is 0 on success, 2 for usage/configuration errors and 1 for any other
failure, with a one-line diagnostic on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .pipeline import METHODS, ConfigError, ExperimentConfig

COMMANDS = ("synth", "train", "downscale", "evaluate", "compare", "run")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdbench", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--method", choices=METHODS, help="downscaling method")
    p.add_argument("--seed", type=int, help="random seed (synthetic data and CNN init)")
    p.add_argument("--out", help="output directory (data/, models/, reports/ live below it)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, method=args.method, seed=args.seed,
                                    out_dir=args.out)
    except (ConfigError, TypeError, ValueError) as exc:
        print(f"sdbench: config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "synth":
            print(pipeline.cmd_synth(cfg))
        elif args.command == "train":
            log = pipeline.cmd_train(cfg)
            flags = sorted({f for s in log["seasons"].values() for part in s.values()
                            if isinstance(part, dict) for f in part.get("flags", [])})
            if flags:
                print(f"sdbench: solver flags: {', '.join(flags)}", file=sys.stderr)
            print(cfg.out_path / "models" / cfg.method)
        elif args.command == "downscale":
            print(pipeline.cmd_downscale(cfg))
        elif args.command == "evaluate":
            paths = pipeline.cmd_evaluate(cfg)
            print(paths["summary"])
        elif args.command == "compare":
            print(pipeline.cmd_compare(cfg))
        else:
            print(json.dumps(pipeline.run_all(cfg), sort_keys=True))
    except Exception as exc:  # noqa: BLE001 - CLI boundary: report and exit nonzero
        print(f"sdbench: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
