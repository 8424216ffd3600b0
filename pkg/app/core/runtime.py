from hashlib import sha256
from pathlib import Path
from typing import Optional, Union

from app.core.config import get_settings
from app.core.logging import get_logger

logger = get_logger(__name__)


def get_default_seed(explicit: Optional[int] = None) -> int:
    """Return the seed a command should run with.

    - Uses the explicit --seed value when one was given.
    - Falls back to MSE2D_SEED (environment or .env), which defaults to 0.
    """
    if explicit is not None:
        seed = int(explicit)
        source = "flag"
    else:
        seed = get_settings().MSE2D_SEED
        source = "MSE2D_SEED"

    logger.info("Using seed=%d (source=%s)", seed, source)
    return seed


def bytes_digest(data: bytes) -> str:
    """Return the sha256 hex digest of a byte string."""
    return sha256(data).hexdigest()


def file_digest(path: Union[str, Path]) -> str:
    """Return the sha256 hex digest of a file's bytes."""
    digest = sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()
