import argparse
from pathlib import Path
from typing import List

from app.commands.common import add_eval_inputs, emit_manifest, int_list, load_eval_set
from app.core.cache import get_cache_stats
from app.core.errors import run_command
from app.core.logging import get_logger
from app.services.checkpoint import Checkpoint, load_checkpoint
from app.services.evaluation import sweep

logger = get_logger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("sweep", help="Evaluate a layer x dim grid of sub-models")
    add_eval_inputs(parser)
    parser.add_argument("--layers", type=int_list, help="Layers to sweep (default: all)")
    parser.add_argument("--dims", type=int_list, help="Dims to sweep (default: training dims plus full)")
    parser.add_argument("--out", required=True, help="CSV output path")
    parser.add_argument("--markdown", help="Optional markdown output path, one table per metric")
    parser.add_argument("--with-cost", dest="with_cost", action="store_true", help="Add relative_cost rows")
    parser.set_defaults(func=run)


def default_dims(checkpoint: Checkpoint) -> List[int]:
    d_model = checkpoint.encoder_config.d_model
    return sorted(set(checkpoint.train_config.objective.dims) | {d_model})


@run_command
def run(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    layers = args.layers or list(range(1, checkpoint.encoder_config.n_layers + 1))
    dims = args.dims or default_dims(checkpoint)
    eval_set, inputs = load_eval_set(args)

    result = sweep(
        checkpoint,
        layers,
        dims,
        eval_set,
        args.task,
        fix_doc=args.fix_doc,
        with_cost=args.with_cost,
    )

    outputs = []
    csv_path = Path(args.out)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(result.to_csv(), encoding="utf-8")
    outputs.append(csv_path)
    if args.markdown:
        md_path = Path(args.markdown)
        md_path.parent.mkdir(parents=True, exist_ok=True)
        md_path.write_text(result.to_markdown(), encoding="utf-8")
        outputs.append(md_path)

    if args.fix_doc and args.task == "retrieval":
        distinct = set(result.corpus_digests.values())
        logger.info("fix-doc sweep: %d distinct corpus matrices across %d cells", len(distinct), len(result.corpus_digests))
    logger.info("Encoding cache: %s", get_cache_stats())

    emit_manifest(
        args,
        {
            "task": args.task,
            "layers": list(layers),
            "dims": list(dims),
            "fix_doc": args.fix_doc,
            "with_cost": args.with_cost,
        },
        checkpoint.train_config.seed,
        [args.checkpoint, *inputs],
        outputs,
    )
    print(f"rows={len(result.rows)} csv={csv_path}")
    return 0
