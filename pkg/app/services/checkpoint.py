"""Binary checkpoint format.

Layout (all integers little-endian):

    magic      8 bytes  b"2DMSE1\\0\\0"
    version    u32
    config     u64 length + UTF-8 JSON (sorted keys)
    tensors    repeated until EOF:
               u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
               float32 payload, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
import orjson
from pydantic import ValidationError

from app.core.errors import CheckpointFormatError, WorkbenchError
from app.core.logging import get_logger
from app.schemas.config import EncoderConfig, TrainConfig
from app.services.encoder import EncoderParams, Vocab

logger = get_logger(__name__)

MAGIC = b"2DMSE1\x00\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """A trained encoder plus everything needed to reproduce or evaluate it."""

    params: EncoderParams
    train_config: TrainConfig
    vocab: Vocab
    final_loss: float
    loss_history: List[float] = field(default_factory=list)

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.params.config

    def metadata(self) -> Dict[str, Any]:
        return {
            "encoder": self.params.config.model_dump(mode="json"),
            "train_config": self.train_config.model_dump(mode="json"),
            "final_loss": float(self.final_loss),
            "loss_history": [float(x) for x in self.loss_history],
            "vocab": list(self.vocab.tokens),
        }


def to_bytes(checkpoint: Checkpoint) -> bytes:
    block = orjson.dumps(checkpoint.metadata(), option=orjson.OPT_SORT_KEYS)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(block)), block]
    for name, value in checkpoint.params.tensors.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    data = to_bytes(checkpoint)
    target.write_bytes(data)
    logger.info("Saved checkpoint %s (%d bytes, %d tensors)", target, len(data), len(checkpoint.params.tensors))
    return target


class _Reader:
    def __init__(self, data: bytes, path: str) -> None:
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, file has {len(self.data)})"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(data, source)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic bytes, not a checkpoint")
    (version,) = reader.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{source}: unsupported version {version}, expected {FORMAT_VERSION}")

    (block_len,) = reader.unpack("<Q", "config length")
    try:
        meta = orjson.loads(reader.take(block_len, "config block"))
        encoder = EncoderConfig.model_validate(meta["encoder"])
        train_config = TrainConfig.model_validate(meta["train_config"])
        vocab = Vocab(meta["vocab"])
        final_loss = float(meta["final_loss"])
        history = [float(x) for x in meta.get("loss_history", [])]
    except (orjson.JSONDecodeError, KeyError, TypeError, ValueError, ValidationError) as exc:
        raise CheckpointFormatError(f"{source}: invalid config block: {exc}") from exc

    tensors: Dict[str, np.ndarray] = {}
    while not reader.exhausted:
        (name_len,) = reader.unpack("<I", "tensor name length")
        raw_name = reader.take(name_len, "tensor name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{source}: tensor name is not UTF-8: {exc}") from exc
        (rank,) = reader.unpack("<I", f"rank of {name}")
        dims = reader.unpack(f"<{rank}Q", f"dims of {name}") if rank else ()
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = reader.take(4 * count, f"payload of {name} ({count} floats)")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)

    try:
        params = EncoderParams(encoder, tensors)
    except WorkbenchError as exc:
        raise CheckpointFormatError(f"{source}: tensors do not match encoder config: {exc}") from exc

    return Checkpoint(params, train_config, vocab, final_loss, history)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    source = str(path)
    checkpoint = from_bytes(Path(path).read_bytes(), source)
    logger.info(
        "Loaded checkpoint %s (L=%d d_model=%d objective=%s)",
        source,
        checkpoint.encoder_config.n_layers,
        checkpoint.encoder_config.d_model,
        checkpoint.train_config.objective.kind,
    )
    return checkpoint


__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "Checkpoint",
    "to_bytes",
    "from_bytes",
    "save_checkpoint",
    "load_checkpoint",
]
