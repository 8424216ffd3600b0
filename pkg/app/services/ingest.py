from collections import Counter
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Type, TypeVar, Union

import orjson
from pydantic import BaseModel, ValidationError

from app.core.errors import IngestError
from app.core.logging import get_logger
from app.schemas.records import CorpusRecord, QueryRecord, RunQrels, StsPair, TrainPair
from app.services.encoder import PAD_TOKEN, UNK_TOKEN, Vocab
from app.services.normalize import whitespace_tokens

logger = get_logger(__name__)

RecordT = TypeVar("RecordT", bound=BaseModel)
PathLike = Union[str, Path]


def _read_lines(path: PathLike) -> List[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise IngestError(str(path), f"not valid UTF-8: {exc}") from exc
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        raise IngestError(str(path), "file is empty")
    return lines


def ingest(path: PathLike, schema: Type[RecordT]) -> List[RecordT]:
    """Parse a JSON-lines file into ``schema`` records, failing on the first bad line.

    Whitespace-only lines are skipped; line numbers in errors are 1-based.
    """
    records: List[RecordT] = []
    for number, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            raw = orjson.loads(line)
        except orjson.JSONDecodeError as exc:
            raise IngestError(str(path), f"malformed JSON: {exc}", line=number) from exc
        if not isinstance(raw, dict):
            raise IngestError(str(path), "expected a JSON object", line=number)
        try:
            records.append(schema.model_validate(raw))
        except ValidationError as exc:
            first = exc.errors()[0]
            field = ".".join(str(part) for part in first.get("loc", ())) or None
            raise IngestError(str(path), first.get("msg", "invalid record"), line=number, field=field) from exc

    logger.info("Ingested %d %s records from %s", len(records), schema.__name__, path)
    return records


def load_corpus(path: PathLike) -> List[CorpusRecord]:
    return ingest(path, CorpusRecord)


def load_queries(path: PathLike) -> List[QueryRecord]:
    return ingest(path, QueryRecord)


def load_sts_pairs(path: PathLike) -> List[StsPair]:
    return ingest(path, StsPair)


def load_train_pairs(path: PathLike) -> List[TrainPair]:
    return ingest(path, TrainPair)


def load_qrels(path: PathLike) -> RunQrels:
    """Tab-separated ``query-id  doc-id  relevance`` rows with relevance 0 or 1."""
    qrels: RunQrels = {}
    for number, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) != 3:
            raise IngestError(str(path), f"expected 3 tab-separated columns, got {len(cols)}", line=number)
        query_id, doc_id, relevance = (c.strip() for c in cols)
        if not query_id or not doc_id:
            raise IngestError(
                str(path), "ids must be non-empty", line=number, field="query-id" if not query_id else "doc-id"
            )
        if relevance not in {"0", "1"}:
            raise IngestError(str(path), f"relevance must be 0 or 1, got {relevance!r}", line=number, field="relevance")
        relevant = qrels.setdefault(query_id, set())
        if relevance == "1":
            relevant.add(doc_id)
    logger.info("Loaded qrels for %d queries from %s", len(qrels), path)
    return qrels


def load_vocab(path: PathLike) -> Vocab:
    """One token per line; the line index is the id."""
    tokens = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        return Vocab(tokens)
    except ValueError as exc:
        raise IngestError(str(path), str(exc), line=1) from exc


def save_vocab(vocab: Vocab, path: PathLike) -> Path:
    target = Path(path)
    target.write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")
    return target


def build_vocab(texts: Iterable[str], size: int) -> Vocab:
    """Most frequent tokens first, ties broken alphabetically, capped at ``size`` ids."""
    counts = Counter(
        token for text in texts for token in whitespace_tokens(text) if token not in (PAD_TOKEN, UNK_TOKEN)
    )
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    tokens = [PAD_TOKEN, UNK_TOKEN] + [token for token, _ in ranked[: max(0, size - 2)]]
    logger.info("Built vocab of %d tokens from %d distinct", len(tokens), len(counts))
    return Vocab(tokens)


def write_jsonl(records: Sequence[BaseModel], path: PathLike) -> Path:
    target = Path(path)
    with open(target, "wb") as handle:
        for record in records:
            handle.write(orjson.dumps(record.model_dump(mode="json")) + b"\n")
    return target


def write_qrels(rows: Sequence[Tuple[str, str, int]], path: PathLike) -> Path:
    target = Path(path)
    target.write_text("".join(f"{q}\t{d}\t{r}\n" for q, d, r in rows), encoding="utf-8")
    return target


__all__ = [
    "ingest",
    "load_corpus",
    "load_queries",
    "load_sts_pairs",
    "load_train_pairs",
    "load_qrels",
    "load_vocab",
    "save_vocab",
    "build_vocab",
    "write_jsonl",
    "write_qrels",
]
