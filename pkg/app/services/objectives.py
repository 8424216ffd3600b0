"""Training losses: contrastive base loss, Matryoshka, 2DMSE V1 and V2.

Every function takes graph nodes and returns a scalar node. Query embeddings
are (B, d); document embeddings are (N, d) with N >= B, where document row i
is the positive of query i and rows beyond B are extra negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ConfigError, PcaError, ShapeError
from app.core.logging import get_logger
from app.schemas.config import ObjectiveConfig
from app.services import pca
from app.services.autodiff import (
    Node,
    add,
    concat,
    constant,
    detach,
    exp,
    l2_normalize_rows,
    log,
    log_softmax,
    matmul,
    mean_all,
    mul,
    prefix,
    scale,
    sub,
    sum_all,
    transpose,
)
from app.services.encoder import LayerEmbeddings

logger = get_logger(__name__)


def truncate(embeddings: Node, k: int) -> Node:
    """First ``k`` columns of an embedding matrix."""
    width = embeddings.shape[-1]
    if not 1 <= k <= width:
        raise ShapeError(f"truncate: k={k} outside 1..{width}")
    if k == width:
        return embeddings
    return prefix(embeddings, k)


def _check_pair(queries: Node, docs: Node) -> None:
    if queries.value.ndim != 2 or docs.value.ndim != 2:
        raise ShapeError(f"expected 2-D embeddings, got {queries.shape} and {docs.shape}")
    if queries.shape[0] < 1:
        raise ShapeError("batch size must be at least 1")
    if queries.shape[1] != docs.shape[1]:
        raise ShapeError(f"query dim {queries.shape[1]} != doc dim {docs.shape[1]}")
    if docs.shape[0] < queries.shape[0]:
        raise ShapeError(f"{docs.shape[0]} documents for {queries.shape[0]} queries")


def _scaled_cosine(queries: Node, docs: Node, temperature: float) -> Node:
    _check_pair(queries, docs)
    sims = matmul(l2_normalize_rows(queries), transpose(l2_normalize_rows(docs)))
    return scale(sims, 1.0 / temperature)


def info_nce(queries: Node, docs: Node, temperature: float) -> Node:
    """Mean cross-entropy of each query against all in-batch documents."""
    log_probs = log_softmax(_scaled_cosine(queries, docs, temperature))
    b, n = log_probs.shape
    targets = np.zeros((b, n))
    targets[np.arange(b), np.arange(b)] = 1.0
    picked = sum_all(mul(log_probs, constant(targets)))
    return scale(picked, -1.0 / b)


@dataclass(frozen=True)
class SimDistribution:
    """Row-stochastic similarity distribution, held as log-probabilities."""

    log_probs: Node

    @classmethod
    def from_probs(cls, probs: Node) -> "SimDistribution":
        """Wrap explicit probabilities; every entry must be positive."""
        return cls(log(probs))

    @property
    def value(self) -> np.ndarray:
        return np.exp(self.log_probs.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.log_probs.shape

    @property
    def requires_grad(self) -> bool:
        return self.log_probs.requires_grad

    def detached(self) -> "SimDistribution":
        return SimDistribution(detach(self.log_probs))


def sim_distribution(queries: Node, docs: Node, temperature: float) -> SimDistribution:
    """Row softmax of the cosine similarity matrix scaled by 1/temperature."""
    return SimDistribution(log_softmax(_scaled_cosine(queries, docs, temperature)))


def kld(p: SimDistribution, q: SimDistribution) -> Node:
    """Mean over rows of sum p * (ln p - ln q)."""
    if p.shape != q.shape:
        raise ShapeError(f"kld: distributions of shape {p.shape} and {q.shape}")
    terms = mul(exp(p.log_probs), sub(p.log_probs, q.log_probs))
    return scale(sum_all(terms), 1.0 / p.shape[0])


def distill(
    complete: SimDistribution, partial: SimDistribution, config: ObjectiveConfig
) -> Node:
    """KLD between two similarity distributions with the teacher side detached.

    ``complete`` is the last-layer/full-dimension distribution and ``partial``
    the sub-layer/truncated one; ``config.kld_teacher`` picks the teacher.
    When ``complete`` carries no gradient (PCA targets), the ``partial``
    setting only reverses the direction of the divergence.
    """
    if config.kld_teacher == "complete":
        return kld(complete.detached(), partial)
    if not complete.requires_grad:
        return kld(partial, complete)
    return kld(partial.detached(), complete)


def matryoshka_loss(
    queries: Node, docs: Node, dims: List[int], temperature: float
) -> Node:
    """Sum of info_nce over every prefix size in ``dims``."""
    terms = [
        info_nce(truncate(queries, k), truncate(docs, k), temperature) for k in dims
    ]
    return _sum_terms(terms)


def sample_sublayer(n_layers: int, rng: np.random.Generator) -> int:
    """Uniform draw of r in [1, L - 1]."""
    if n_layers < 2:
        raise ConfigError(f"sub-layer sampling needs at least 2 layers, got {n_layers}")
    return int(rng.integers(1, n_layers))


def layer_weight(i: int, n_layers: int) -> float:
    """1 / (1 + ln i) below the last layer, 1 at the last layer."""
    if not 1 <= i <= n_layers:
        raise ShapeError(f"layer {i} outside 1..{n_layers}")
    if i == n_layers:
        return 1.0
    return 1.0 / (1.0 + math.log(i))


def _sum_terms(terms: List[Node]) -> Node:
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return total


def _weighted(terms: List[Tuple[float, Node]]) -> Node:
    return _sum_terms([scale(node, w) if w != 1.0 else node for w, node in terms])


def _v1_dims(config: ObjectiveConfig, d_model: int, rng: np.random.Generator) -> List[int]:
    if config.v1_dim_mode == "full":
        return [d_model]
    if config.v1_dim_mode == "sample":
        return [int(config.dims[rng.integers(0, len(config.dims))])]
    return list(config.dims)


def v1_loss(
    queries: LayerEmbeddings,
    docs: LayerEmbeddings,
    config: ObjectiveConfig,
    rng: Optional[np.random.Generator] = None,
    sublayer: Optional[int] = None,
) -> Node:
    """Last-layer loss + sampled sub-layer loss + lambda * KLD(last || sub-layer)."""
    return v1_components(queries, docs, config, rng, sublayer).total


@dataclass
class LossBreakdown:
    """A scalar loss node and the float value of each named component."""

    total: Node
    parts: Dict[str, float] = field(default_factory=dict)


def v1_components(
    queries: LayerEmbeddings,
    docs: LayerEmbeddings,
    config: ObjectiveConfig,
    rng: Optional[np.random.Generator] = None,
    sublayer: Optional[int] = None,
) -> LossBreakdown:
    n_layers = len(queries)
    if n_layers < 2:
        raise ConfigError("v1 needs at least 2 layers")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    r = sublayer if sublayer is not None else sample_sublayer(n_layers, rng)
    if not 1 <= r < n_layers:
        raise ConfigError(f"sub-layer {r} outside 1..{n_layers - 1}")

    tau = config.temperature
    dims = _v1_dims(config, queries.last.shape[1], rng)
    last = matryoshka_loss(queries.last, docs.last, dims, tau)
    sampled = matryoshka_loss(queries.layer(r), docs.layer(r), dims, tau)
    divergence = distill(
        sim_distribution(queries.last, docs.last, tau),
        sim_distribution(queries.layer(r), docs.layer(r), tau),
        config,
    )
    total = add(add(last, sampled), scale(divergence, config.lambda_kld))
    return LossBreakdown(
        total,
        {"last": last.item(), "random": sampled.item(), "kld": divergence.item(), "sublayer": float(r)},
    )


def _doc_layer(docs: LayerEmbeddings, i: int, config: ObjectiveConfig) -> Node:
    """Document embeddings paired with query layer ``i``."""
    return docs.last if config.fix_doc else docs.layer(i)


def v2_layer_loss(
    queries: LayerEmbeddings, docs: LayerEmbeddings, config: ObjectiveConfig
) -> Node:
    """Sum over layers of w_i * info_nce at the target dimension(s)."""
    n_layers = len(queries)
    terms: List[Tuple[float, Node]] = []
    for i in range(1, n_layers + 1):
        q, d = queries.layer(i), _doc_layer(docs, i, config)
        for k in config.v2_dims():
            terms.append(
                (layer_weight(i, n_layers), info_nce(truncate(q, k), truncate(d, k), config.temperature))
            )
    return _weighted(terms)


def pca_targets(
    embeddings: LayerEmbeddings,
    k: int,
    fit_rows: Optional[Sequence[Optional[int]]] = None,
) -> List[Node]:
    """Per layer, the batch PCA projection of the full-dim embeddings to k dims.

    Layer i's basis is fit on its first ``fit_rows[i - 1]`` rows (every row
    when None) and applied to all rows. Directions the batch cannot support
    come out as zero columns. Targets are constants: they carry no gradient
    back to the encoder.
    """
    rows_per_layer = list(fit_rows) if fit_rows is not None else [None] * len(embeddings)
    if len(rows_per_layer) != len(embeddings):
        raise ShapeError(f"{len(rows_per_layer)} fit_rows entries for {len(embeddings)} layers")
    targets: List[Node] = []
    for node, rows in zip(embeddings.layers, rows_per_layer):
        if node.shape[0] < 2:
            raise PcaError(f"PCA targets need at least 2 rows, got {node.shape[0]}")
        targets.append(constant(pca.project_top_k(node.value, k, rows)))
    return targets


def _mse(a: Node, b: Node) -> Node:
    diff = sub(a, b)
    return mean_all(mul(diff, diff))


def _has_zero_row(node: Node) -> bool:
    return bool(np.any(~node.value.any(axis=1)))


def v2_dim_loss(
    queries: LayerEmbeddings, docs: LayerEmbeddings, config: ObjectiveConfig
) -> Node:
    """Sum over layers of w_i * (MSE to PCA targets + KLD against their scores).

    Each layer's targets come from one PCA fit on the stacked query and
    document rows of that layer. Under fix_doc, sub-layer bases are fit on the
    query rows alone and sub-layer document rows are left out of the MSE term.
    """
    n_layers = len(queries)
    n_queries = queries.last.shape[0]
    tau = config.temperature
    paired = [_doc_layer(docs, i, config) for i in range(1, n_layers + 1)]
    stacked = LayerEmbeddings(
        [
            constant(np.concatenate([queries.layer(i).value, d.value], axis=0))
            for i, d in enumerate(paired, start=1)
        ]
    )
    fit_rows = [
        n_queries if config.fix_doc and i < n_layers else None for i in range(1, n_layers + 1)
    ]
    targets = {k: pca_targets(stacked, k, fit_rows) for k in config.v2_dims()}

    terms: List[Tuple[float, Node]] = []
    for i in range(1, n_layers + 1):
        q, d = queries.layer(i), paired[i - 1]
        for k in config.v2_dims():
            target = targets[k][i - 1].value
            target_q, target_d = constant(target[:n_queries]), constant(target[n_queries:])
            student_q, student_d = truncate(q, k), truncate(d, k)
            if config.fix_doc and i < n_layers:
                term = _mse(student_q, target_q)
            else:
                term = _mse(concat([student_q, student_d]), concat([target_q, target_d]))
            if _has_zero_row(target_q) or _has_zero_row(target_d):
                logger.debug("layer %d k=%d: degenerate PCA targets, KLD term skipped", i, k)
            else:
                divergence = distill(
                    sim_distribution(target_q, target_d, tau),
                    sim_distribution(student_q, student_d, tau),
                    config,
                )
                term = add(term, divergence)
            terms.append((layer_weight(i, n_layers), term))
    return _weighted(terms)


def score_alignment_loss(
    queries: LayerEmbeddings, docs: LayerEmbeddings, config: ObjectiveConfig
) -> Node:
    """Sum over layers of w_i * KLD(full-model scores || truncated sub-model scores)."""
    n_layers = len(queries)
    tau = config.temperature
    complete = sim_distribution(queries.last, docs.last, tau)
    terms: List[Tuple[float, Node]] = []
    for i in range(1, n_layers + 1):
        q, d = queries.layer(i), _doc_layer(docs, i, config)
        for k in config.v2_dims():
            partial = sim_distribution(truncate(q, k), truncate(d, k), tau)
            terms.append((layer_weight(i, n_layers), distill(complete, partial, config)))
    return _weighted(terms)


def full_dim_loss(
    queries: LayerEmbeddings, docs: LayerEmbeddings, config: ObjectiveConfig
) -> Node:
    """Sum over layers of w_i * info_nce at full dimension."""
    n_layers = len(queries)
    terms = [
        (layer_weight(i, n_layers), info_nce(queries.layer(i), _doc_layer(docs, i, config), config.temperature))
        for i in range(1, n_layers + 1)
    ]
    return _weighted(terms)


def v2_components(
    queries: LayerEmbeddings, docs: LayerEmbeddings, config: ObjectiveConfig
) -> LossBreakdown:
    layer_term = v2_layer_loss(queries, docs, config)
    parts: Dict[str, float] = {"layer": layer_term.item()}
    total = scale(layer_term, config.alpha)

    if config.beta > 0:
        if config.score:
            dim_term = score_alignment_loss(queries, docs, config)
            parts["score"] = dim_term.item()
        else:
            dim_term = v2_dim_loss(queries, docs, config)
            parts["dim"] = dim_term.item()
        total = add(total, scale(dim_term, config.beta))

    last = info_nce(queries.last, docs.last, config.temperature)
    parts["last_full"] = last.item()
    total = add(total, last)

    if config.full_dim:
        extra = full_dim_loss(queries, docs, config)
        parts["full_dim"] = extra.item()
        total = add(total, extra)
    return LossBreakdown(total, parts)


def v2_total_loss(
    queries: LayerEmbeddings, docs: LayerEmbeddings, config: ObjectiveConfig
) -> Node:
    """alpha * layer loss + beta * (dim or score loss) + last-layer full-dim loss."""
    return v2_components(queries, docs, config).total


def compute_objective(
    queries: LayerEmbeddings,
    docs: LayerEmbeddings,
    config: ObjectiveConfig,
    rng: Optional[np.random.Generator] = None,
) -> LossBreakdown:
    """Dispatch on ``config.kind`` and return the loss with its components."""
    tau = config.temperature
    if config.kind == "full":
        loss = info_nce(queries.last, docs.last, tau)
        return LossBreakdown(loss, {"full": loss.item()})
    if config.kind == "mse":
        loss = matryoshka_loss(queries.last, docs.last, config.dims, tau)
        return LossBreakdown(loss, {"matryoshka": loss.item()})
    if config.kind == "v1":
        return v1_components(queries, docs, config, rng)
    if config.kind == "v2":
        return v2_components(queries, docs, config)
    raise ConfigError(f"unknown objective kind {config.kind!r}")


__all__ = [
    "LossBreakdown",
    "SimDistribution",
    "truncate",
    "info_nce",
    "sim_distribution",
    "kld",
    "distill",
    "matryoshka_loss",
    "sample_sublayer",
    "layer_weight",
    "v1_loss",
    "v1_components",
    "v2_layer_loss",
    "pca_targets",
    "v2_dim_loss",
    "score_alignment_loss",
    "full_dim_loss",
    "v2_components",
    "v2_total_loss",
    "compute_objective",
]
