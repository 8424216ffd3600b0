import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import orjson

from app.core.errors import ConfigError, IngestError
from app.core.logging import get_logger
from app.core.manifest import build_manifest, manifest_path_for, write_manifest
from app.services.evaluation import EvalSet, RetrievalEvalSet, StsEvalSet
from app.services.ingest import load_corpus, load_qrels, load_queries, load_sts_pairs

logger = get_logger(__name__)


def int_list(raw: str) -> List[int]:
    """argparse type for comma-separated integers such as ``8,16,32``."""
    try:
        values = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def str_list(raw: str) -> List[str]:
    return [part.strip() for part in raw.split(",") if part.strip()]


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        data = orjson.loads(Path(path).read_bytes())
    except orjson.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def add_eval_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", required=True, help="Path to a trained checkpoint")
    parser.add_argument("--task", choices=["retrieval", "sts"], default="retrieval")
    parser.add_argument("--corpus", help="Corpus JSON-lines {id, text} (retrieval)")
    parser.add_argument("--queries", help="Queries JSON-lines {id, text} (retrieval)")
    parser.add_argument("--qrels", help="TSV query-id, doc-id, relevance (retrieval)")
    parser.add_argument("--pairs", help="STS pairs JSON-lines {s1, s2, score} (sts)")
    parser.add_argument(
        "--fix-doc",
        action="store_true",
        help="Embed the corpus with the last layer at every cell (retrieval only)",
    )


def load_eval_set(args: argparse.Namespace) -> Tuple[EvalSet, List[str]]:
    """Load the files named on the command line; returns the set plus its input paths."""
    if args.task == "retrieval":
        missing = [flag for flag in ("corpus", "queries", "qrels") if not getattr(args, flag)]
        if missing:
            raise ConfigError(f"retrieval task needs --{', --'.join(missing)}")
        inputs = [args.corpus, args.queries, args.qrels]
        return (
            RetrievalEvalSet(
                corpus=load_corpus(args.corpus),
                queries=load_queries(args.queries),
                qrels=load_qrels(args.qrels),
            ),
            inputs,
        )
    if not args.pairs:
        raise ConfigError("sts task needs --pairs")
    pairs = load_sts_pairs(args.pairs)
    if len(pairs) < 2:
        raise IngestError(args.pairs, "need at least 2 STS pairs")
    return StsEvalSet(pairs=pairs), [args.pairs]


def emit_manifest(
    args: argparse.Namespace,
    config: Dict[str, Any],
    seed: int,
    inputs: Sequence[Union[str, Path]],
    outputs: Sequence[Union[str, Path]],
) -> List[Path]:
    """Write one manifest next to every output artifact."""
    manifest = build_manifest(getattr(args, "argv", []), config, seed, inputs, outputs)
    return [write_manifest(manifest, manifest_path_for(output)) for output in outputs]
