import re
from hashlib import sha256
from typing import Iterable, List

import numpy as np


def normalize_text(text: str) -> str:
    """Lowercase and collapse whitespace (including newlines) to single spaces."""
    return re.sub(r"\s+", " ", text or "").strip().lower()


def whitespace_tokens(text: str) -> List[str]:
    normalized = normalize_text(text)
    return normalized.split(" ") if normalized else []


def texts_digest(texts: Iterable[str]) -> str:
    """Stable SHA256 digest of an ordered list of texts."""
    digest = sha256()
    for text in texts:
        encoded = text.encode("utf-8")
        digest.update(len(encoded).to_bytes(8, "little"))
        digest.update(encoded)
    return digest.hexdigest()


def array_digest(array: np.ndarray) -> str:
    """SHA256 over dtype, shape and little-endian bytes of an array."""
    contiguous = np.ascontiguousarray(array)
    little = contiguous.astype(contiguous.dtype.newbyteorder("<"), copy=False)
    base = f"{little.dtype.str}|{little.shape}|".encode("utf-8")
    return sha256(base + little.tobytes()).hexdigest()
