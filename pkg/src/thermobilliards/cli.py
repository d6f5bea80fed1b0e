"""Command-line entry point.

    thermobilliards <command> --config CONFIG.json [--seed N] [--out DIR]
                    [--workers K]

Exit status: 0 when the command's verification passed (or the run completed
for plain simulation), 1 when a verification check failed, 2 on execution
errors (bad config, geometry failures, ...).  A failed theory check is a
result, not a crash.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import COMMANDS, ConfigError, EXIT_ERROR, parse_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thermobilliards",
        description="Random billiards driven by disk thermostats: "
                    "simulation and numerical verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0]
                           if fn.__doc__ else None)
        p.add_argument("--config", required=True, type=Path,
                       help="JSON experiment configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed")
        p.add_argument("--out", type=Path, default=None,
                       help="override the config's output directory")
        p.add_argument("--workers", type=int, default=1,
                       help="worker threads (results are identical for any count)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config.read_text(encoding="utf-8"))
    except OSError as err:
        print(f"error: cannot read config: {err}", file=sys.stderr)
        return EXIT_ERROR
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR
    out_dir = args.out if args.out is not None else Path(config.output_dir)
    try:
        code = COMMANDS[args.command](
            config, out_dir, seed_override=args.seed, n_workers=args.workers
        )
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as err:  # execution error: report with reproduction info
        seed = args.seed if args.seed is not None else "config-default"
        print(
            f"error: {args.command} failed ({type(err).__name__}: {err}); "
            f"seed={seed}, config={args.config}",
            file=sys.stderr,
        )
        return EXIT_ERROR
    return code


if __name__ == "__main__":
    sys.exit(main())
