from threading import Lock
from typing import Dict, Hashable, List, Optional

import numpy as np
from cachetools import LRUCache

from app.core.config import get_settings
from app.core.logging import get_logger

logger = get_logger(__name__)

_settings = get_settings()
_CACHE_ENABLED: bool = _settings.CACHE_ENABLED

_encoding_cache: LRUCache = LRUCache(maxsize=_settings.CACHE_MAX_ENTRIES)

_lock = Lock()

_hits: int = 0
_misses: int = 0


def _make_key(params_digest: str, texts_digest: str) -> Hashable:
    return (params_digest, texts_digest)


def get_encodings_cached(
    params_digest: str, texts_digest: str
) -> Optional[List[np.ndarray]]:
    """Return cached per-layer encodings or None."""
    global _hits, _misses
    if not _CACHE_ENABLED:
        return None

    key = _make_key(params_digest, texts_digest)
    with _lock:
        if key in _encoding_cache:
            _hits += 1
            logger.debug("Encoding cache hit texts=%s", texts_digest[:12])
            return _encoding_cache[key]
        _misses += 1
    logger.debug("Encoding cache miss texts=%s", texts_digest[:12])
    return None


def set_encodings_cached(
    params_digest: str, texts_digest: str, value: List[np.ndarray]
) -> None:
    if not _CACHE_ENABLED:
        return
    key = _make_key(params_digest, texts_digest)
    with _lock:
        _encoding_cache[key] = value


def clear_encoding_cache() -> None:
    global _hits, _misses
    with _lock:
        _encoding_cache.clear()
        _hits = 0
        _misses = 0


def get_cache_stats() -> Dict[str, int]:
    """Return a snapshot of cache hit/miss counters."""
    return {"encoding_hits": _hits, "encoding_misses": _misses}
