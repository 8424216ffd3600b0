import logging
import sys
from typing import Mapping, Optional

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"


def configure_logging(log_level: str) -> None:
    """Configure root logging for the workbench.

    Records go to stderr; stdout is reserved for the CSV and markdown that
    ``eval`` and ``sweep`` print.
    """
    level = getattr(logging, log_level.upper(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Return a module-level logger."""
    return logging.getLogger(name or "app")


def format_parts(parts: Mapping[str, float], digits: int = 4) -> str:
    """``name=value`` pairs of a loss breakdown, in insertion order."""
    return " ".join(f"{name}={value:.{digits}f}" for name, value in parts.items())
