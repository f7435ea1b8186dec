"""Command-line entry point"""
import argparse
import sys
from typing import List, Optional

import structlog

from amopt import __version__
from amopt.cli import eval as eval_cmd
from amopt.cli import train, transfer
from amopt.core.config import settings
from amopt.core.errors import AmoptError
from amopt.core.logging import configure_logging

logger = structlog.get_logger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amopt",
        description="Direct and iterative amortized policy optimization: training and diagnostics",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    train.register(subparsers)
    eval_cmd.register(subparsers)
    transfer.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(settings)
    try:
        return args.handler(args)
    except AmoptError as exc:
        logger.error("command_failed", command=args.command, error=type(exc).__name__, exit_code=exc.exit_code)
        print(f"error: {exc.detail}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
