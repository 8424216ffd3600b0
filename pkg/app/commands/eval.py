import argparse
from pathlib import Path

from app.commands.common import add_eval_inputs, emit_manifest, load_eval_set
from app.core.errors import run_command
from app.core.logging import get_logger
from app.schemas.records import SweepRow
from app.services.checkpoint import load_checkpoint
from app.services.evaluation import SweepResult, evaluate_cell, make_selector, objective_label

logger = get_logger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("eval", help="Evaluate one (layer, dim) operating point")
    add_eval_inputs(parser)
    parser.add_argument("--layer", type=int, help="1-based layer (default: last)")
    parser.add_argument("--dim", type=int, help="Embedding dim (default: full)")
    parser.add_argument("--out", help="Optional CSV file for the result rows")
    parser.set_defaults(func=run)


@run_command
def run(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    config = checkpoint.encoder_config
    selector = make_selector(
        config,
        args.layer if args.layer is not None else config.n_layers,
        args.dim if args.dim is not None else config.d_model,
    )
    eval_set, inputs = load_eval_set(args)

    metrics = evaluate_cell(checkpoint, selector, eval_set, args.task, fix_doc=args.fix_doc)
    label = objective_label(checkpoint.train_config.objective)
    result = SweepResult(
        rows=[
            SweepRow(
                objective=label,
                layer=selector.layer,
                dim=selector.dim,
                metric=name,
                value=value,
                seed=checkpoint.train_config.seed,
            )
            for name, value in metrics.items()
        ]
    )
    csv_text = result.to_csv()
    print(csv_text, end="")
    for name, value in metrics.items():
        logger.info("layer=%d dim=%d %s=%.6f", selector.layer, selector.dim, name, value)

    if args.out:
        target = Path(args.out)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(csv_text, encoding="utf-8")
        emit_manifest(
            args,
            {"task": args.task, "layer": selector.layer, "dim": selector.dim, "fix_doc": args.fix_doc},
            checkpoint.train_config.seed,
            [args.checkpoint, *inputs],
            [target],
        )
    return 0
