import argparse
import sys
from typing import List, Optional

from app.commands import eval as eval_command
from app.commands import gradcheck as gradcheck_command
from app.commands import replay as replay_command
from app.commands import sweep as sweep_command
from app.commands import synth as synth_command
from app.commands import train as train_command
from app.core.config import get_settings
from app.core.logging import configure_logging, get_logger

settings = get_settings()
configure_logging(settings.LOG_LEVEL)
logger = get_logger(__name__)

COMMANDS = (
    train_command,
    eval_command,
    sweep_command,
    gradcheck_command,
    synth_command,
    replay_command,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mse2d",
        description="Train and evaluate layer x dimension Matryoshka sentence encoders.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.APP_VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logger.debug("Running command %s", args.command)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
