"""Command-line entry point ``odtq``."""

from __future__ import annotations

import argparse
import logging
import sys

from .exceptions import OdtqError
from .pipeline import STAGES, run_pipeline


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odtq", description="Origin-destination travel-time intervals on road networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("run",):
        helptext = "run every stage in order" if name == "run" else f"run the {name} stage"
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--out", default="out", help="artifact directory (default: out)")
        p.add_argument("--seed", type=_u64, default=None, help="override the [eval] seed")
        p.add_argument("--threads", type=_positive, default=None,
                       help="BLAS thread limit (1 = deterministic reference mode)")
        if name in ("predict", "run"):
            p.add_argument("--queries", default=None,
                           help="queries file for predict (default: the evaluation split)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stages = STAGES if args.command == "run" else (args.command,)
    try:
        report = run_pipeline(args.config, stages, out=args.out, seed=args.seed,
                              threads=args.threads, queries=getattr(args, "queries", None))
    except (OdtqError, OSError) as exc:
        print(f"odtq: error: {exc}", file=sys.stderr)
        return 2
    if report is not None:
        sys.stdout.write(report.to_json())
    return 0


if __name__ == "__main__":
    sys.exit(main())
