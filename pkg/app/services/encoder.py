"""Toy post-layer-norm transformer encoder with a pooled embedding per layer."""

from __future__ import annotations

from dataclasses import dataclass
from hashlib import sha256
from typing import Dict, Iterator, List, Mapping, Sequence, Tuple

import numpy as np

from app.core.errors import ShapeError
from app.core.logging import get_logger
from app.schemas.config import EncoderConfig, PoolingMode
from app.services.autodiff import (
    Node,
    add,
    constant,
    embedding,
    first_token,
    gelu,
    get_dtype,
    layer_norm,
    leaf,
    masked_mean,
    matmul,
    merge_heads,
    row_softmax,
    scale,
    split_heads,
    transpose,
)
from app.services.normalize import whitespace_tokens

logger = get_logger(__name__)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"

_MASK_VALUE = -1e4
_INIT_STD = 0.02


class Vocab:
    """Token <-> id table; ids 0 and 1 are reserved for [PAD] and [UNK]."""

    def __init__(self, tokens: Sequence[str]) -> None:
        if len(tokens) < 2 or tokens[PAD_ID] != PAD_TOKEN or tokens[UNK_ID] != UNK_TOKEN:
            raise ValueError("vocab must start with [PAD] and [UNK] at ids 0 and 1")
        self.tokens: List[str] = list(tokens)
        self._ids: Dict[str, int] = {}
        for idx, token in enumerate(self.tokens):
            self._ids.setdefault(token, idx)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)


def tokenize(text: str, vocab: Vocab, max_seq_len: int) -> List[int]:
    """Lowercased whitespace tokens mapped through ``vocab``, truncated.

    Unknown tokens map to [UNK]; text with no tokens becomes a single [UNK].
    """
    ids = [vocab.id_of(token) for token in whitespace_tokens(text)][:max_seq_len]
    return ids or [UNK_ID]


def pad_batch(token_lists: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists; returns (ids, pad_mask) with pad_mask true at [PAD]."""
    if not token_lists:
        raise ShapeError("cannot pad an empty batch")
    width = max(len(ids) for ids in token_lists)
    ids = np.full((len(token_lists), width), PAD_ID, dtype=np.int64)
    pad_mask = np.ones((len(token_lists), width), dtype=bool)
    for row, tokens in enumerate(token_lists):
        ids[row, : len(tokens)] = tokens
        pad_mask[row, : len(tokens)] = False
    return ids, pad_mask


class EncoderParams:
    """All encoder weights, as an ordered name -> array mapping."""

    def __init__(self, config: EncoderConfig, tensors: Mapping[str, np.ndarray]) -> None:
        self.config = config
        self.tensors: Dict[str, np.ndarray] = dict(tensors)
        expected = parameter_shapes(config)
        if list(self.tensors) != list(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"parameter names do not match config: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def names(self) -> List[str]:
        return list(self.tensors)

    def as_leaves(self, requires_grad: bool = True) -> Dict[str, Node]:
        return {
            name: leaf(value, name=name, requires_grad=requires_grad)
            for name, value in self.tensors.items()
        }

    def digest(self) -> str:
        digest = sha256(self.config.model_dump_json().encode("utf-8"))
        for name, value in self.tensors.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
        return digest.hexdigest()


def parameter_shapes(config: EncoderConfig) -> Dict[str, Tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes: Dict[str, Tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_seq_len, d),
        "emb_ln.gamma": (d,),
        "emb_ln.beta": (d,),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes.update(
            {
                f"{p}.attn.wq": (d, d),
                f"{p}.attn.bq": (d,),
                f"{p}.attn.wk": (d, d),
                f"{p}.attn.bk": (d,),
                f"{p}.attn.wv": (d, d),
                f"{p}.attn.bv": (d,),
                f"{p}.attn.wo": (d, d),
                f"{p}.attn.bo": (d,),
                f"{p}.ln1.gamma": (d,),
                f"{p}.ln1.beta": (d,),
                f"{p}.ffn.w1": (d, f),
                f"{p}.ffn.b1": (f,),
                f"{p}.ffn.w2": (f, d),
                f"{p}.ffn.b2": (d,),
                f"{p}.ln2.gamma": (d,),
                f"{p}.ln2.beta": (d,),
            }
        )
    return shapes


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".beta") or len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = rng.normal(0.0, _INIT_STD, size=shape).astype(np.float32)
    logger.info(
        "Initialised encoder L=%d d_model=%d heads=%d d_ff=%d vocab=%d (%d tensors)",
        config.n_layers,
        config.d_model,
        config.n_heads,
        config.d_ff,
        config.vocab_size,
        len(tensors),
    )
    return EncoderParams(config, tensors)


def prune_params(params: EncoderParams, n_layers: int) -> EncoderParams:
    """Keep the embedding block and the first ``n_layers`` transformer layers."""
    if not 1 <= n_layers <= params.config.n_layers:
        raise ShapeError(f"cannot prune {params.config.n_layers} layers to {n_layers}")
    config = params.config.model_copy(update={"n_layers": n_layers})
    keep = parameter_shapes(config)
    return EncoderParams(config, {name: params.tensors[name] for name in keep})


@dataclass
class LayerEmbeddings:
    """Pooled sentence embeddings after every layer; ``layers[i - 1]`` is layer i."""

    layers: List[Node]

    def __len__(self) -> int:
        return len(self.layers)

    def layer(self, i: int) -> Node:
        if not 1 <= i <= len(self.layers):
            raise ShapeError(f"layer {i} outside 1..{len(self.layers)}")
        return self.layers[i - 1]

    @property
    def last(self) -> Node:
        return self.layers[-1]


def pool(hidden: Node, pad_mask: np.ndarray, mode: PoolingMode) -> Node:
    """Mean over non-[PAD] positions, or the position-0 state."""
    if mode == "mean":
        return masked_mean(hidden, ~np.asarray(pad_mask, dtype=bool))
    if mode == "first":
        if np.any(np.asarray(pad_mask, dtype=bool).all(axis=1)):
            raise ShapeError("pool: a row has no unmasked positions (all-PAD row)")
        return first_token(hidden)
    raise ValueError(f"unknown pooling mode {mode!r}")


def _attention_bias(pad_mask: np.ndarray, n_heads: int) -> Node:
    b, t = pad_mask.shape
    bias = np.where(pad_mask, _MASK_VALUE, 0.0).astype(get_dtype())
    full = np.broadcast_to(bias[:, None, None, :], (b, n_heads, t, t)).reshape(b * n_heads, t, t)
    return constant(full)


def _layer(
    h: Node, weights: Mapping[str, Node], i: int, config: EncoderConfig, bias: Node
) -> Node:
    p = f"layers.{i}"
    heads = config.n_heads
    q = split_heads(add(matmul(h, weights[f"{p}.attn.wq"]), weights[f"{p}.attn.bq"]), heads)
    k = split_heads(add(matmul(h, weights[f"{p}.attn.wk"]), weights[f"{p}.attn.bk"]), heads)
    v = split_heads(add(matmul(h, weights[f"{p}.attn.wv"]), weights[f"{p}.attn.bv"]), heads)

    head_dim = config.d_model // heads
    scores = add(scale(matmul(q, transpose(k)), 1.0 / np.sqrt(head_dim)), bias)
    context = merge_heads(matmul(row_softmax(scores), v), heads)
    attended = add(matmul(context, weights[f"{p}.attn.wo"]), weights[f"{p}.attn.bo"])
    h = layer_norm(add(h, attended), weights[f"{p}.ln1.gamma"], weights[f"{p}.ln1.beta"])

    ff = gelu(add(matmul(h, weights[f"{p}.ffn.w1"]), weights[f"{p}.ffn.b1"]))
    ff = add(matmul(ff, weights[f"{p}.ffn.w2"]), weights[f"{p}.ffn.b2"])
    return layer_norm(add(h, ff), weights[f"{p}.ln2.gamma"], weights[f"{p}.ln2.beta"])


def encode_all_layers(
    ids: np.ndarray,
    pad_mask: np.ndarray,
    weights: Mapping[str, Node],
    config: EncoderConfig,
) -> LayerEmbeddings:
    """One forward pass; entry i is the pooled output after transformer layer i."""
    ids = np.asarray(ids, dtype=np.int64)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if ids.ndim != 2 or ids.shape[0] == 0:
        raise ShapeError(f"expected a non-empty (batch, seq) id matrix, got {ids.shape}")
    if pad_mask.shape != ids.shape:
        raise ShapeError(f"pad mask {pad_mask.shape} does not match ids {ids.shape}")
    if ids.max() >= config.vocab_size or ids.min() < 0:
        raise ShapeError(f"token id {int(ids.max())} outside vocab of {config.vocab_size}")
    batch, seq_len = ids.shape
    if seq_len > config.max_seq_len:
        raise ShapeError(f"sequence length {seq_len} exceeds max_seq_len {config.max_seq_len}")

    positions = np.broadcast_to(np.arange(seq_len), (batch, seq_len))
    h = add(embedding(weights["tok_emb"], ids), embedding(weights["pos_emb"], positions))
    h = layer_norm(h, weights["emb_ln.gamma"], weights["emb_ln.beta"])

    bias = _attention_bias(pad_mask, config.n_heads)
    pooled: List[Node] = []
    for i in range(config.n_layers):
        h = _layer(h, weights, i, config, bias)
        pooled.append(pool(h, pad_mask, config.pooling))
    return LayerEmbeddings(pooled)


def encode_texts(
    params: EncoderParams,
    vocab: Vocab,
    texts: Sequence[str],
    batch_size: int = 64,
) -> List[np.ndarray]:
    """Inference helper: per-layer (len(texts), d_model) float32 matrices."""
    config = params.config
    per_layer: List[List[np.ndarray]] = [[] for _ in range(config.n_layers)]
    weights = params.as_leaves(requires_grad=False)
    for start in range(0, len(texts), batch_size):
        chunk = texts[start : start + batch_size]
        ids, pad_mask = pad_batch([tokenize(t, vocab, config.max_seq_len) for t in chunk])
        layers = encode_all_layers(ids, pad_mask, weights, config)
        for i, node in enumerate(layers.layers):
            per_layer[i].append(node.value)
    if not texts:
        return [np.zeros((0, config.d_model), dtype=np.float32) for _ in range(config.n_layers)]
    return [np.concatenate(chunks, axis=0).astype(np.float32) for chunks in per_layer]


__all__ = [
    "PAD_ID",
    "UNK_ID",
    "PAD_TOKEN",
    "UNK_TOKEN",
    "Vocab",
    "tokenize",
    "pad_batch",
    "EncoderParams",
    "parameter_shapes",
    "init_params",
    "prune_params",
    "LayerEmbeddings",
    "pool",
    "encode_all_layers",
    "encode_texts",
]
