"""Command tree: every subcommand shares --config/--output/--seed and runs under the output lock."""
import argparse
from typing import List, Optional

from loguru import logger

from ..core.config import settings
from ..core.errors import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, GraphS4Error
from ..core.logging import configure_logging
from .commands import COMMANDS
from .deps import configure_torch, load_run_config, output_lock


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphs4", description=settings.PROJECT_NAME)
    parser.add_argument("--config", default=None, help=f"run config JSON (default {settings.DEFAULT_CONFIG_PATH})")
    parser.add_argument("--output", default=None, help="override output_dir")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--log-level", default=None, help=f"log level (default {settings.LOG_LEVEL})")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad usage; usage errors are validation errors here
        return EXIT_OK if e.code in (0, None) else EXIT_VALIDATION
    configure_logging(level=args.log_level)
    try:
        config = load_run_config(args.config, output=args.output, seed=args.seed)
        configure_logging(level=args.log_level, log_file=settings.LOG_FILE or config.output_path / "run.log")
        configure_torch(config)
        with output_lock(config):
            logger.info("{} (seed {}, output {})", args.command, config.seed, config.output_path)
            return args.handler(args, config)
    except GraphS4Error as e:
        logger.error("{}", e.detail)
        return e.exit_code
    except Exception:
        logger.exception("{} failed", args.command)
        return EXIT_RUNTIME

