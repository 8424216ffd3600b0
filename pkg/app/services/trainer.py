from pathlib import Path
from time import perf_counter
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import get_settings
from app.core.errors import NonFiniteError, ShapeError
from app.core.logging import format_parts, get_logger
from app.core.metrics import StepTimings
from app.schemas.config import TrainConfig
from app.schemas.records import TrainPair
from app.services.autodiff import Node, backward
from app.services.checkpoint import Checkpoint, save_checkpoint
from app.services.encoder import (
    EncoderParams,
    LayerEmbeddings,
    Vocab,
    encode_all_layers,
    init_params,
    pad_batch,
    tokenize,
)
from app.services.objectives import LossBreakdown, compute_objective
from app.services.optim import AdamHyper, AdamState, adam_step

logger = get_logger(__name__)

CHECKPOINT_FILENAME = "model.ckpt"

TokenizedPair = Tuple[List[int], List[int], List[List[int]]]


def tokenize_pairs(
    pairs: Sequence[TrainPair], vocab: Vocab, max_seq_len: int
) -> List[TokenizedPair]:
    return [
        (
            tokenize(p.query, vocab, max_seq_len),
            tokenize(p.positive, vocab, max_seq_len),
            [tokenize(n, vocab, max_seq_len) for n in p.negatives],
        )
        for p in pairs
    ]


def iterate_batches(
    n_items: int, batch_size: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    """Endless stream of index batches, reshuffled every epoch.

    A trailing partial batch is kept when it holds at least 2 items or when it
    is the whole dataset.
    """
    if n_items < 1:
        raise ShapeError("cannot batch an empty dataset")
    while True:
        order = rng.permutation(n_items)
        for start in range(0, n_items, batch_size):
            chunk = order[start : start + batch_size]
            if len(chunk) >= 2 or len(chunk) == n_items:
                yield chunk


def encode_batch(
    tokenized: Sequence[TokenizedPair],
    indices: np.ndarray,
    weights: Dict[str, Node],
    config: TrainConfig,
) -> Tuple[LayerEmbeddings, LayerEmbeddings]:
    """Queries and documents (positives first, then hard negatives) of one batch."""
    if len(indices) == 0:
        raise ShapeError("empty batch")
    chosen = [tokenized[i] for i in indices]
    query_ids, query_mask = pad_batch([q for q, _, _ in chosen])
    doc_lists = [pos for _, pos, _ in chosen] + [n for _, _, negs in chosen for n in negs]
    doc_ids, doc_mask = pad_batch(doc_lists)
    queries = encode_all_layers(query_ids, query_mask, weights, config.encoder)
    docs = encode_all_layers(doc_ids, doc_mask, weights, config.encoder)
    return queries, docs


def evaluate_objective(
    params: EncoderParams,
    tokenized: Sequence[TokenizedPair],
    indices: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
) -> Tuple[LossBreakdown, Dict[str, Node]]:
    weights = params.as_leaves()
    queries, docs = encode_batch(tokenized, indices, weights, config)
    return compute_objective(queries, docs, config.objective, rng), weights


def train(
    config: TrainConfig,
    dataset: Sequence[TrainPair],
    vocab: Vocab,
    initial: Optional[EncoderParams] = None,
) -> Checkpoint:
    """Run ``config.steps`` Adam steps over ``dataset`` and return the checkpoint.

    ``initial`` warm-starts from existing weights (for example a pruned encoder);
    its config must equal ``config.encoder``.
    """
    if not dataset:
        raise ShapeError("training dataset is empty")
    if len(vocab) > config.encoder.vocab_size:
        raise ShapeError(
            f"vocab of {len(vocab)} tokens does not fit vocab_size={config.encoder.vocab_size}"
        )

    settings = get_settings()
    log_every = settings.LOG_EVERY
    if initial is not None:
        if initial.config != config.encoder:
            raise ShapeError("initial weights do not match the encoder config")
        params = initial
    else:
        params = init_params(config.encoder, config.seed)
    state = AdamState.zeros_like(params)
    hyper = AdamHyper(
        lr=config.learning_rate,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_eps,
    )

    tokenized = tokenize_pairs(dataset, vocab, config.encoder.max_seq_len)
    batches = iterate_batches(len(tokenized), config.batch_size, np.random.default_rng(config.seed))
    objective_rng = np.random.default_rng([config.seed, config.objective.seed])

    logger.info(
        "Training objective=%s steps=%d batch=%d lr=%g on %d pairs",
        config.objective.kind,
        config.steps,
        config.batch_size,
        config.learning_rate,
        len(tokenized),
    )

    timings = StepTimings()
    history: List[float] = []
    for step in range(config.steps):
        start = perf_counter()
        indices = next(batches)
        breakdown, weights = evaluate_objective(params, tokenized, indices, config, objective_rng)
        loss = breakdown.total.item()
        if not np.isfinite(loss):
            raise NonFiniteError("train", f"non-finite loss at step {step}")

        if step % log_every == 0 or step == config.steps - 1:
            logger.info("step=%d loss=%.6f %s", step, loss, format_parts(breakdown.parts))

        backward(breakdown.total)
        grads = {name: node.grad for name, node in weights.items()}
        params, state = adam_step(params, grads, state, hyper)
        history.append(loss)
        timings.record((perf_counter() - start) * 1000.0)

    stats = timings.snapshot()
    logger.info(
        "Finished %d steps: final loss=%.6f mean_step_ms=%.2f p95_step_ms=%.2f",
        config.steps,
        history[-1],
        stats["mean_ms"],
        stats["p95_ms"],
    )

    checkpoint = Checkpoint(
        params=params,
        train_config=config,
        vocab=vocab,
        final_loss=history[-1],
        loss_history=history,
    )
    if config.checkpoint_dir:
        save_checkpoint(checkpoint, Path(config.checkpoint_dir) / CHECKPOINT_FILENAME)
    return checkpoint


__all__ = [
    "CHECKPOINT_FILENAME",
    "tokenize_pairs",
    "iterate_batches",
    "encode_batch",
    "evaluate_objective",
    "train",
]
