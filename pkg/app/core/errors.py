import logging
from functools import wraps
from typing import Callable, Optional

logger = logging.getLogger(__name__)


class WorkbenchError(RuntimeError):
    """Base class for every error raised by the workbench."""

    exit_code = 1


class ShapeError(WorkbenchError):
    """Raised when operand dimensions do not line up."""


class NonFiniteError(WorkbenchError):
    """Raised when a value, loss or gradient contains NaN or Inf."""

    def __init__(self, where: str, message: str) -> None:
        self.where = where
        super().__init__(f"{where}: {message}")


class GraphError(WorkbenchError):
    """Raised on invalid use of a computation graph."""


class ConfigError(WorkbenchError):
    """Raised when a configuration or flag combination is invalid."""

    exit_code = 2


class SelectorError(WorkbenchError):
    """Raised when a (layer, dim) operating point is out of range."""

    exit_code = 2


class PcaError(WorkbenchError):
    """Raised when a batch cannot support the requested PCA fit."""


class IngestError(WorkbenchError):
    """Raised when an input file violates its schema."""

    exit_code = 2

    def __init__(
        self,
        path: str,
        message: str,
        line: Optional[int] = None,
        field: Optional[str] = None,
    ) -> None:
        self.path = path
        self.line = line
        self.field = field
        location = path if line is None else f"{path}:{line}"
        if field:
            location = f"{location} field '{field}'"
        super().__init__(f"{location}: {message}")


class CheckpointFormatError(WorkbenchError):
    """Raised when a checkpoint file is corrupt or of an unknown version."""

    exit_code = 3


class GradcheckFailure(WorkbenchError):
    """Raised when one or more gradient checks exceed tolerance."""

    exit_code = 4


def run_command(fn: Callable[..., int]) -> Callable[..., int]:
    """Wrap a CLI command so errors become log lines and exit codes."""

    @wraps(fn)
    def wrapper(*args, **kwargs) -> int:
        try:
            return fn(*args, **kwargs)
        except WorkbenchError as exc:
            if exc.exit_code == 1:
                logger.error("%s: %s", type(exc).__name__, exc)
            else:
                logger.warning("%s: %s", type(exc).__name__, exc)
            return exc.exit_code
        except FileNotFoundError as exc:
            logger.error("File not found: %s", exc.filename or exc)
            return 2
        except Exception as exc:  # noqa: BLE001
            logger.exception("Unhandled error", exc_info=exc)
            return 1

    return wrapper


__all__ = [
    "WorkbenchError",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "ConfigError",
    "SelectorError",
    "PcaError",
    "IngestError",
    "CheckpointFormatError",
    "GradcheckFailure",
    "run_command",
]
