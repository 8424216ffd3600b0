from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.errors import PcaError, ShapeError
from app.core.logging import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class PcaBasis:
    """Column means plus a (d, k) matrix of orthonormal principal directions.

    Columns are ordered by descending explained variance.
    """

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[1]


def fit(embeddings: np.ndarray, k: int) -> PcaBasis:
    """Top-``k`` right singular vectors of the centered batch.

    Each component's sign is fixed so that its largest-magnitude entry is
    positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"PCA expects a 2-D batch, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise PcaError(f"PCA needs at least 2 rows, got {n}")
    if not 1 <= k <= min(n - 1, d):
        raise PcaError(f"k={k} outside 1..min(batch-1, dim)={min(n - 1, d)}")

    mean = x.mean(axis=0)
    centered = x - mean
    if not np.any(centered):
        raise PcaError("batch has zero variance (all rows identical)")

    # SVD of the centered matrix rather than the covariance, for conditioning.
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k].T.copy()

    pivots = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[pivots, np.arange(k)])
    signs[signs == 0] = 1.0
    components *= signs

    explained = (singular[:k] ** 2) / (n - 1)
    return PcaBasis(mean=mean, components=components, explained_variance=explained)


def project(embeddings: np.ndarray, basis: PcaBasis) -> np.ndarray:
    """``(x - mean) @ components``."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != basis.mean.shape[0]:
        raise ShapeError(
            f"cannot project shape {x.shape} with a basis of dimension {basis.mean.shape[0]}"
        )
    return (x - basis.mean) @ basis.components


def reconstruction_error(embeddings: np.ndarray, basis: PcaBasis) -> float:
    """Sum of squared residuals after projecting onto the basis and back."""
    x = np.asarray(embeddings, dtype=np.float64)
    restored = project(x, basis) @ basis.components.T + basis.mean
    return float(((x - restored) ** 2).sum())


def project_top_k(embeddings: np.ndarray, k: int, fit_rows: Optional[int] = None) -> np.ndarray:
    """(n, k) coordinates on the top principal directions of a batch.

    The basis is fit on the first ``fit_rows`` rows (all rows by default) and
    applied to every row. A batch of m fit rows supports at most m - 1
    directions; columns past that rank, or every column of a zero-variance
    batch, are zero.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"PCA expects a 2-D batch, got shape {x.shape}")
    n, d = x.shape
    if not 1 <= k <= d:
        raise PcaError(f"k={k} outside 1..{d}")
    m = n if fit_rows is None else fit_rows
    if not 1 <= m <= n:
        raise PcaError(f"fit_rows={m} outside 1..{n}")

    coords = np.zeros((n, k))
    sample = x[:m]
    rank = min(k, m - 1)
    if rank < 1 or not np.any(sample - sample.mean(axis=0)):
        logger.debug("PCA on %d rows has no usable direction, targets are zero", m)
        return coords
    if rank < k:
        logger.debug("PCA on %d rows caps k=%d at rank %d", m, k, rank)
    coords[:, :rank] = project(x, fit(sample, rank))
    return coords


__all__ = ["PcaBasis", "fit", "project", "reconstruction_error", "project_top_k"]
