"""Train one separately fine-tuned model per (layer, dim) cell.

Each cell warm-starts from the first ``layer`` layers of a base checkpoint and
trains only at width ``dim``; the cell is then evaluated at exactly that
operating point. Results go to one CSV in the sweep format.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.core.config import get_settings  # noqa: E402
from app.core.logging import configure_logging, get_logger  # noqa: E402
from app.core.manifest import build_manifest, manifest_path_for, write_manifest  # noqa: E402
from app.schemas.config import ObjectiveConfig, TrainConfig  # noqa: E402
from app.schemas.records import SweepRow  # noqa: E402
from app.services.checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from app.services.encoder import prune_params  # noqa: E402
from app.services.evaluation import RetrievalEvalSet, SweepResult, evaluate_cell, make_selector  # noqa: E402
from app.services.ingest import load_corpus, load_qrels, load_queries, load_train_pairs  # noqa: E402
from app.services.trainer import CHECKPOINT_FILENAME, train  # noqa: E402

logger = get_logger("train_separate_cells")

LABEL = "separate"


def _ints(raw: str):
    return [int(x) for x in raw.split(",") if x.strip()]


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Train and evaluate a separately trained model per grid cell.")
    parser.add_argument("--base", required=True, help="Base checkpoint the cells are pruned from")
    parser.add_argument("--train", required=True, help="Training pairs JSON-lines")
    parser.add_argument("--corpus", required=True)
    parser.add_argument("--queries", required=True)
    parser.add_argument("--qrels", required=True)
    parser.add_argument("--layers", type=_ints, required=True, help="e.g. 1,2,4")
    parser.add_argument("--dims", type=_ints, required=True, help="e.g. 8,16,64")
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True, help="Output directory")
    return parser.parse_args()


def main() -> int:
    configure_logging(get_settings().LOG_LEVEL)
    args = parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    base = load_checkpoint(args.base)
    pairs = load_train_pairs(args.train)
    eval_set = RetrievalEvalSet(
        corpus=load_corpus(args.corpus),
        queries=load_queries(args.queries),
        qrels=load_qrels(args.qrels),
    )

    cells = [make_selector(base.encoder_config, layer, dim) for layer in args.layers for dim in args.dims]
    result = SweepResult()
    for cell in cells:
        initial = prune_params(base.params, cell.layer)
        config = TrainConfig(
            objective=ObjectiveConfig(kind="mse", dims=[cell.dim], seed=args.seed),
            encoder=initial.config,
            steps=args.steps,
            batch_size=args.batch,
            seed=args.seed,
        )
        checkpoint = train(config, pairs, base.vocab, initial=initial)
        save_checkpoint(checkpoint, out / f"L{cell.layer}_d{cell.dim}" / CHECKPOINT_FILENAME)
        metrics = evaluate_cell(checkpoint, cell, eval_set, "retrieval")
        for name, value in metrics.items():
            result.rows.append(
                SweepRow(objective=LABEL, layer=cell.layer, dim=cell.dim, metric=name, value=value, seed=args.seed)
            )
        logger.info("cell (%d, %d): %s", cell.layer, cell.dim, metrics)

    csv_path = out / "separate_cells.csv"
    csv_path.write_text(result.to_csv(), encoding="utf-8")
    manifest = build_manifest(
        sys.argv[1:],
        {"layers": args.layers, "dims": args.dims, "steps": args.steps, "batch": args.batch},
        args.seed,
        [args.base, args.train, args.corpus, args.queries, args.qrels],
        [csv_path],
    )
    write_manifest(manifest, manifest_path_for(csv_path))
    print(result.to_markdown(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
