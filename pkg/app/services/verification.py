"""Float64 gradient checks of every objective through a toy encoder."""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.logging import get_logger
from app.schemas.config import EncoderConfig, ObjectiveConfig
from app.services.autodiff import Node, gradcheck
from app.services.encoder import PAD_ID, encode_all_layers, init_params
from app.services.objectives import compute_objective

logger = get_logger(__name__)

TOY_ENCODER = EncoderConfig(
    vocab_size=12, d_model=8, n_layers=2, n_heads=2, d_ff=12, max_seq_len=5, pooling="mean"
)
TOY_BATCH = 4
TOY_DIMS = [2, 4, 8]
TOY_TARGET_DIM = 4
TOY_TEMPERATURE = 0.1

SUITE: Tuple[Tuple[str, Dict[str, object]], ...] = (
    ("full", {"kind": "full"}),
    ("mse", {"kind": "mse"}),
    ("v1", {"kind": "v1"}),
    ("v2", {"kind": "v2"}),
    ("v2+score", {"kind": "v2", "score": True}),
    ("v2+full-dim", {"kind": "v2", "full_dim": True}),
    ("v2+fix-doc", {"kind": "v2", "fix_doc": True}),
)


@dataclass
class GradcheckResult:
    label: str
    seed: int
    max_error: float
    passed: bool


def toy_objective(overrides: Dict[str, object], seed: int) -> ObjectiveConfig:
    return ObjectiveConfig.model_validate(
        {
            "dims": TOY_DIMS,
            "target_dim": TOY_TARGET_DIM,
            "temperature": TOY_TEMPERATURE,
            "seed": seed,
            **overrides,
        }
    )


def _toy_batch(rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    ids = rng.integers(2, TOY_ENCODER.vocab_size, size=(TOY_BATCH, TOY_ENCODER.max_seq_len))
    # ragged lengths so the pad mask is exercised
    lengths = rng.integers(2, TOY_ENCODER.max_seq_len + 1, size=TOY_BATCH)
    for row, length in enumerate(lengths):
        ids[row, length:] = PAD_ID
    return ids, ids == PAD_ID


def check_objective(
    label: str,
    objective: ObjectiveConfig,
    seed: int,
    max_coords: Optional[int] = None,
) -> float:
    """Max relative gradient error of ``objective`` w.r.t. every encoder parameter."""
    rng = np.random.default_rng(seed)
    params = init_params(TOY_ENCODER, seed)
    point = {name: value.astype(np.float64) for name, value in params.tensors.items()}
    query_ids, query_mask = _toy_batch(rng)
    doc_ids, doc_mask = _toy_batch(rng)

    def loss(weights: Dict[str, Node]) -> Node:
        queries = encode_all_layers(query_ids, query_mask, weights, TOY_ENCODER)
        docs = encode_all_layers(doc_ids, doc_mask, weights, TOY_ENCODER)
        return compute_objective(queries, docs, objective, np.random.default_rng(seed)).total

    error = gradcheck(loss, point, max_coords=max_coords or None, seed=seed)
    logger.debug("gradcheck %s seed=%d max_rel_err=%.3e", label, seed, error)
    return error


def run_suite(
    seeds: Sequence[int],
    tolerance: float,
    max_coords: Optional[int] = None,
    labels: Optional[Sequence[str]] = None,
) -> List[GradcheckResult]:
    chosen = [(label, overrides) for label, overrides in SUITE if labels is None or label in labels]
    results: List[GradcheckResult] = []
    for label, overrides in chosen:
        for seed in seeds:
            error = check_objective(label, toy_objective(overrides, seed), seed, max_coords)
            results.append(GradcheckResult(label, seed, error, error < tolerance))
    return results


__all__ = [
    "TOY_ENCODER",
    "SUITE",
    "GradcheckResult",
    "toy_objective",
    "check_objective",
    "run_suite",
]
