import argparse
from pathlib import Path

from app.commands.common import emit_manifest
from app.core.errors import run_command
from app.core.logging import get_logger
from app.core.runtime import get_default_seed
from app.services.ingest import build_vocab, save_vocab, write_jsonl, write_qrels
from app.services.synthetic import make_retrieval_task, make_sts_task

logger = get_logger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("synth", help="Write synthetic retrieval and STS data sets")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--n-docs", dest="n_docs", type=int, default=2000)
    parser.add_argument("--n-train", dest="n_train", type=int, default=500)
    parser.add_argument("--n-eval", dest="n_eval", type=int, default=100)
    parser.add_argument("--sts-pairs", dest="sts_pairs", type=int, default=200)
    parser.add_argument("--vocab-size", dest="vocab_size", type=int, default=512)
    parser.set_defaults(func=run)


@run_command
def run(args: argparse.Namespace) -> int:
    seed = get_default_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    task = make_retrieval_task(args.n_docs, args.n_train, args.n_eval, args.vocab_size, seed)
    sts = make_sts_task(args.sts_pairs, args.vocab_size, seed)

    retrieval_texts = [d.text for d in task.corpus] + [p.query for p in task.train] + [q.text for q in task.queries]
    outputs = [
        write_jsonl(task.corpus, out / "corpus.jsonl"),
        write_jsonl(task.train, out / "train.jsonl"),
        write_jsonl(task.queries, out / "queries.jsonl"),
        write_qrels(task.qrel_rows, out / "qrels.tsv"),
        save_vocab(build_vocab(retrieval_texts, args.vocab_size), out / "vocab.txt"),
        write_jsonl(sts, out / "sts.jsonl"),
        save_vocab(build_vocab([t for p in sts for t in (p.s1, p.s2)], args.vocab_size), out / "sts_vocab.txt"),
    ]

    config = {
        "n_docs": args.n_docs,
        "n_train": args.n_train,
        "n_eval": args.n_eval,
        "sts_pairs": args.sts_pairs,
        "vocab_size": args.vocab_size,
    }
    emit_manifest(args, config, seed, [], outputs)
    print(f"wrote {len(outputs)} files to {out}")
    return 0
