"""Sub-model extraction, retrieval and STS metrics, and the layer x dim sweep."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from app.core.cache import get_encodings_cached, set_encodings_cached
from app.core.config import get_settings
from app.core.errors import NonFiniteError, SelectorError, ShapeError
from app.core.logging import get_logger
from app.schemas.config import EncoderConfig, ObjectiveConfig
from app.schemas.records import (
    CorpusRecord,
    QueryRecord,
    RunQrels,
    StsPair,
    SubModelSelector,
    SweepRow,
    Task,
)
from app.services.checkpoint import Checkpoint
from app.services.encoder import encode_texts
from app.services.normalize import array_digest, texts_digest

logger = get_logger(__name__)

CUTOFF = 10
CSV_HEADER = ("objective", "layer", "dim", "metric", "value", "seed")
NOMINAL_SEQ_LEN = 32

Ranking = List[Tuple[str, float]]


@dataclass
class RetrievalEvalSet:
    corpus: List[CorpusRecord]
    queries: List[QueryRecord]
    qrels: RunQrels


@dataclass
class StsEvalSet:
    pairs: List[StsPair]


EvalSet = Union[RetrievalEvalSet, StsEvalSet]


def objective_label(config: ObjectiveConfig) -> str:
    """``v2+score+fix-doc`` style label used in sweep rows."""
    parts = [config.kind]
    for flag, name in (("score", "score"), ("full_dim", "full-dim"), ("fix_doc", "fix-doc"), ("plus_dims", "dims")):
        if getattr(config, flag):
            parts.append(name)
    return "+".join(parts)


def _check_cell(config: EncoderConfig, layer: int, dim: int) -> None:
    if not 1 <= layer <= config.n_layers:
        raise SelectorError(f"layer {layer} outside 1..{config.n_layers}")
    if not 1 <= dim <= config.d_model:
        raise SelectorError(f"dim {dim} outside 1..{config.d_model}")


def check_selector(config: EncoderConfig, selector: SubModelSelector) -> None:
    _check_cell(config, selector.layer, selector.dim)


def make_selector(config: EncoderConfig, layer: int, dim: int) -> SubModelSelector:
    """Validate raw flag values against the encoder before building the selector."""
    _check_cell(config, layer, dim)
    return SubModelSelector(layer=layer, dim=dim)


def layer_encodings(checkpoint: Checkpoint, texts: Sequence[str]) -> List[np.ndarray]:
    """Per-layer full-width encodings of ``texts``, served from the cache when possible."""
    params_key = checkpoint.params.digest()
    texts_key = texts_digest(texts)
    cached = get_encodings_cached(params_key, texts_key)
    if cached is not None:
        return cached
    encodings = encode_texts(
        checkpoint.params, checkpoint.vocab, list(texts), batch_size=get_settings().EVAL_BATCH_SIZE
    )
    set_encodings_cached(params_key, texts_key, encodings)
    return encodings


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    x = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NonFiniteError("normalize_rows", "embedding with zero norm")
    return x / norms


def _cut(encodings: List[np.ndarray], selector: SubModelSelector) -> np.ndarray:
    return normalize_rows(encodings[selector.layer - 1][:, : selector.dim])


def embed_at(checkpoint: Checkpoint, selector: SubModelSelector, texts: Sequence[str]) -> np.ndarray:
    """Layer ``selector.layer`` embeddings truncated to ``selector.dim`` and L2-normalized."""
    check_selector(checkpoint.encoder_config, selector)
    return _cut(layer_encodings(checkpoint, texts), selector)


def brute_force_topk(
    query: np.ndarray, corpus: np.ndarray, doc_ids: Sequence[str], n: int
) -> Ranking:
    """Exact top-``n`` by dot product; equal scores are ordered by ascending doc id."""
    if n < 1:
        raise ShapeError(f"n must be >= 1, got {n}")
    corpus = np.asarray(corpus)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise ShapeError("corpus is empty")
    if corpus.shape[0] != len(doc_ids):
        raise ShapeError(f"{corpus.shape[0]} corpus rows but {len(doc_ids)} doc ids")
    query = np.asarray(query).reshape(-1)
    if query.shape[0] != corpus.shape[1]:
        raise ShapeError(f"query dim {query.shape[0]} != corpus dim {corpus.shape[1]}")

    scores = corpus @ query
    id_rank = np.argsort(np.argsort(np.asarray(doc_ids), kind="stable"), kind="stable")
    order = np.lexsort((id_rank, -scores))[:n]
    return [(doc_ids[i], float(scores[i])) for i in order]


def _relevant_for(query_id: str, qrels: RunQrels, metric: str) -> set:
    relevant = qrels.get(query_id)
    if relevant is None:
        logger.warning("%s: query %s missing from qrels, scored as zero-relevant", metric, query_id)
        return set()
    if not relevant:
        logger.warning("%s: query %s has no relevant documents, contributes 0", metric, query_id)
    return relevant


def mrr_at_k(rankings: Mapping[str, Sequence[str]], qrels: RunQrels, k: int = CUTOFF) -> float:
    if not rankings:
        raise ShapeError("no rankings to score")
    total = 0.0
    for query_id, ranked in rankings.items():
        relevant = _relevant_for(query_id, qrels, "mrr")
        for rank, doc_id in enumerate(ranked[:k], start=1):
            if doc_id in relevant:
                total += 1.0 / rank
                break
    return total / len(rankings)


def ndcg_at_k(rankings: Mapping[str, Sequence[str]], qrels: RunQrels, k: int = CUTOFF) -> float:
    """Binary-gain NDCG with a 1/log2(rank + 1) discount."""
    if not rankings:
        raise ShapeError("no rankings to score")
    total = 0.0
    for query_id, ranked in rankings.items():
        relevant = _relevant_for(query_id, qrels, "ndcg")
        if not relevant:
            continue
        dcg = sum(
            1.0 / math.log2(rank + 1)
            for rank, doc_id in enumerate(ranked[:k], start=1)
            if doc_id in relevant
        )
        ideal = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(len(relevant), k) + 1))
        total += dcg / ideal
    return total / len(rankings)


def spearman(predicted: Sequence[float], gold: Sequence[float]) -> float:
    """Pearson correlation of tie-averaged ranks."""
    a = np.asarray(predicted, dtype=np.float64)
    b = np.asarray(gold, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"spearman needs two equal-length lists, got {a.shape} and {b.shape}")
    if a.shape[0] < 2:
        raise ShapeError("spearman needs at least 2 items")
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        raise NonFiniteError("spearman", "zero variance in one of the inputs")
    return float(ra @ rb) / denom


def cell_cost(config: EncoderConfig, selector: SubModelSelector, n_docs: int = 0) -> float:
    """Encoding plus scoring FLOPs of a sub-model relative to the full model.

    Layers are counted at a nominal sequence length; scoring is one dot
    product of width ``dim`` per corpus document.
    """
    check_selector(config, selector)
    seq = min(NOMINAL_SEQ_LEN, config.max_seq_len)
    d = config.d_model
    per_layer = seq * (8 * d * d + 4 * seq * d + 4 * d * config.d_ff)
    sub = selector.layer * per_layer + n_docs * 2 * selector.dim
    full = config.n_layers * per_layer + n_docs * 2 * d
    return sub / full


@dataclass
class SweepResult:
    rows: List[SweepRow] = field(default_factory=list)
    corpus_digests: Dict[Tuple[int, int], str] = field(default_factory=dict)

    def metrics(self) -> List[str]:
        return list(dict.fromkeys(row.metric for row in self.rows))

    def value(self, layer: int, dim: int, metric: str) -> float:
        for row in self.rows:
            if (row.layer, row.dim, row.metric) == (layer, dim, metric):
                return row.value
        raise KeyError((layer, dim, metric))

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in self.rows:
            writer.writerow([row.objective, row.layer, row.dim, row.metric, f"{row.value:.10g}", row.seed])
        return buffer.getvalue()

    def to_markdown(self) -> str:
        """One layer x dim table per metric."""
        blocks: List[str] = []
        for metric in self.metrics():
            cells = {(r.layer, r.dim): r.value for r in self.rows if r.metric == metric}
            layers = sorted({layer for layer, _ in cells})
            dims = sorted({dim for _, dim in cells})
            lines = [
                f"### {metric}",
                "",
                "| layer \\ dim | " + " | ".join(str(d) for d in dims) + " |",
                "|---" * (len(dims) + 1) + "|",
            ]
            for layer in layers:
                values = [f"{cells[(layer, d)]:.4f}" if (layer, d) in cells else "" for d in dims]
                lines.append(f"| {layer} | " + " | ".join(values) + " |")
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"


def _retrieval_metrics(
    query_matrix: np.ndarray,
    corpus_matrix: np.ndarray,
    eval_set: RetrievalEvalSet,
    doc_ids: List[str],
) -> Dict[str, float]:
    rankings = {
        q.id: [doc_id for doc_id, _ in brute_force_topk(row, corpus_matrix, doc_ids, CUTOFF)]
        for q, row in zip(eval_set.queries, query_matrix)
    }
    return {
        f"mrr@{CUTOFF}": mrr_at_k(rankings, eval_set.qrels, CUTOFF),
        f"ndcg@{CUTOFF}": ndcg_at_k(rankings, eval_set.qrels, CUTOFF),
    }


class _Encoded:
    """Per-layer encodings of one eval set, computed once per sweep."""

    def __init__(self, checkpoint: Checkpoint, eval_set: EvalSet, task: Task) -> None:
        if task == "retrieval":
            if not isinstance(eval_set, RetrievalEvalSet):
                raise ShapeError("retrieval task needs a RetrievalEvalSet")
            if not eval_set.corpus:
                raise ShapeError("corpus is empty")
            if not eval_set.queries:
                raise ShapeError("no eval queries")
            self.first = layer_encodings(checkpoint, [q.text for q in eval_set.queries])
            self.second = layer_encodings(checkpoint, [d.text for d in eval_set.corpus])
            self.doc_ids = [d.id for d in eval_set.corpus]
        else:
            if not isinstance(eval_set, StsEvalSet):
                raise ShapeError("sts task needs an StsEvalSet")
            self.first = layer_encodings(checkpoint, [p.s1 for p in eval_set.pairs])
            self.second = layer_encodings(checkpoint, [p.s2 for p in eval_set.pairs])
            self.doc_ids = []
        self.task = task
        self.eval_set = eval_set
        self.n_layers = checkpoint.encoder_config.n_layers
        self.d_model = checkpoint.encoder_config.d_model

    def corpus_source(self, selector: SubModelSelector, fix_doc: bool) -> np.ndarray:
        layer = self.n_layers if fix_doc else selector.layer
        return self.second[layer - 1]

    def score(self, selector: SubModelSelector, fix_doc: bool) -> Tuple[Dict[str, float], str]:
        first = _cut(self.first, selector)
        source = self.corpus_source(selector, fix_doc and self.task == "retrieval")
        second = normalize_rows(source[:, : selector.dim])
        digest = array_digest(source)
        if self.task == "retrieval":
            return _retrieval_metrics(first, second, self.eval_set, self.doc_ids), digest
        sims = np.einsum("ij,ij->i", first, second)
        gold = [p.score for p in self.eval_set.pairs]
        return {"spearman": spearman(sims, gold)}, digest


def evaluate_cell(
    checkpoint: Checkpoint,
    selector: SubModelSelector,
    eval_set: EvalSet,
    task: Task,
    fix_doc: bool = False,
) -> Dict[str, float]:
    """Metrics of one (layer, dim) operating point."""
    check_selector(checkpoint.encoder_config, selector)
    metrics, _ = _Encoded(checkpoint, eval_set, task).score(selector, fix_doc)
    return metrics


def sweep(
    checkpoint: Checkpoint,
    layers: Sequence[int],
    dims: Sequence[int],
    eval_set: EvalSet,
    task: Task,
    fix_doc: bool = False,
    with_cost: bool = False,
) -> SweepResult:
    """Score every (layer, dim) cell of the grid; rows follow layer-major grid order.

    With ``fix_doc`` the corpus side of retrieval cells always comes from the
    last layer and is only truncated to each cell's dim.
    """
    if not layers or not dims:
        raise SelectorError("layer and dim lists must be non-empty")
    config = checkpoint.encoder_config
    selectors = [make_selector(config, layer, dim) for layer in layers for dim in dims]

    label = objective_label(checkpoint.train_config.objective)
    if fix_doc and task == "retrieval":
        label = f"{label}@fix-doc-eval"
    seed = checkpoint.train_config.seed
    encoded = _Encoded(checkpoint, eval_set, task)
    n_docs = len(encoded.doc_ids)

    result = SweepResult()
    for selector in selectors:
        metrics, digest = encoded.score(selector, fix_doc)
        if with_cost:
            metrics["relative_cost"] = cell_cost(config, selector, n_docs)
        result.corpus_digests[(selector.layer, selector.dim)] = digest
        for name, value in metrics.items():
            result.rows.append(
                SweepRow(objective=label, layer=selector.layer, dim=selector.dim, metric=name, value=value, seed=seed)
            )
        logger.debug("cell layer=%d dim=%d %s", selector.layer, selector.dim, metrics)

    logger.info(
        "Sweep %s over %d layers x %d dims: %d rows (task=%s fix_doc=%s)",
        label,
        len(layers),
        len(dims),
        len(result.rows),
        task,
        fix_doc,
    )
    return result


__all__ = [
    "CUTOFF",
    "CSV_HEADER",
    "RetrievalEvalSet",
    "StsEvalSet",
    "EvalSet",
    "SweepResult",
    "objective_label",
    "check_selector",
    "make_selector",
    "layer_encodings",
    "normalize_rows",
    "embed_at",
    "brute_force_topk",
    "mrr_at_k",
    "ndcg_at_k",
    "spearman",
    "cell_cost",
    "evaluate_cell",
    "sweep",
]
