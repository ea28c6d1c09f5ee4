"""``genq <command> --config PATH [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_threads() -> None:
    # must run before numpy loads its BLAS
    threads = os.environ.get("GENQ_THREADS")
    if threads:
        for var in THREAD_VARS:
            os.environ[var] = threads


def build_parser() -> argparse.ArgumentParser:
    from genq.harness.commands import COMMANDS
    parser = argparse.ArgumentParser(prog="genq", description="Data-free quantization experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    parser.add_argument("--out", default="runs", help="output directory (default: runs)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    _apply_threads()
    from genq.errors import ConfigError, GenqError
    from genq.harness.commands import run_command
    from genq.harness.config import load_config

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 32:
                raise ConfigError("--seed must be a u32")
            cfg = cfg.with_seed(args.seed)
        report = run_command(args.command, cfg, args.out)
    except ConfigError as exc:
        print(f"genq: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GenqError, ValueError, OSError) as exc:
        print(f"genq: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    sys.stdout.write(report.csv_text())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
