"""Command line entry point: ``raresim <kind> --config PATH``."""

from __future__ import annotations

import argparse
import sys

from .errors import CacheInvalidError, ConfigError, FieldParseError, RaresimError
from .experiments import KINDS, load_config, run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="raresim", description="Rare-event simulation campaigns for chain diffusions.")
    p.add_argument("kind", choices=KINDS, help="experiment to run")
    p.add_argument("--config", required=True, help="TOML experiment config")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--workers", type=int, help="sampling threads (default: one per CPU)")
    p.add_argument("--dump-paths", action="store_true", help="also write a few sample paths to paths.csv")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg.kind = args.kind
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = args.out
        if args.workers is not None:
            cfg.workers = args.workers
        if args.dump_paths:
            cfg.dump_paths = True
        cfg.validate()
    except ConfigError as exc:
        print(f"raresim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run(cfg)
    except (ConfigError, CacheInvalidError, FieldParseError) as exc:
        print(f"raresim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RaresimError, FloatingPointError, ArithmeticError) as exc:
        print(f"raresim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for w in manifest.warnings:
        print(f"raresim: warning: {w}", file=sys.stderr)
    print(f"wrote {', '.join(sorted(manifest.outputs))} and manifest.json to {cfg.output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
