import argparse
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import ValidationError

from app.commands.common import emit_manifest, int_list, load_config_file, str_list
from app.core.errors import ConfigError, run_command
from app.core.logging import get_logger
from app.core.runtime import get_default_seed
from app.schemas.config import TrainConfig
from app.services.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from app.services.encoder import prune_params
from app.services.ingest import build_vocab, load_train_pairs, load_vocab
from app.services.trainer import CHECKPOINT_FILENAME, train

logger = get_logger(__name__)

VARIANT_FLAGS = {
    "score": "score",
    "full-dim": "full_dim",
    "fix-doc": "fix_doc",
    "dims": "plus_dims",
}

# flag attribute -> key inside the objective block
_OBJECTIVE_FLAGS = {
    "objective": "kind",
    "dims": "dims",
    "target_dim": "target_dim",
    "lambda_kld": "lambda",
    "alpha": "alpha",
    "beta": "beta",
    "temp": "temperature",
}
_RUN_FLAGS = {
    "steps": "steps",
    "batch": "batch_size",
    "lr": "learning_rate",
}


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("train", help="Train an encoder with one objective")
    parser.add_argument("--train", required=True, help="Training pairs JSON-lines {query, positive, negatives?}")
    parser.add_argument("--out", required=True, help="Output directory for the checkpoint")
    parser.add_argument("--config", help="TrainConfig JSON; flags override its values")
    parser.add_argument("--vocab", help="Vocabulary file; built from the training texts when absent")
    parser.add_argument("--objective", choices=["full", "mse", "v1", "v2"])
    parser.add_argument("--dims", type=int_list, help="Ascending dims, e.g. 8,16,32,64")
    parser.add_argument("--target-dim", dest="target_dim", type=int)
    parser.add_argument("--variants", type=str_list, default=[], help="Any of score,full-dim,fix-doc,dims")
    parser.add_argument("--lambda", dest="lambda_kld", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--temp", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument(
        "--init",
        help="Warm-start from this checkpoint, pruned to --n-layers (separately trained cells)",
    )
    parser.add_argument("--n-layers", dest="n_layers", type=int, help="Encoder depth")
    parser.set_defaults(func=run)


def resolve_config(args: argparse.Namespace, base: Optional[Checkpoint] = None) -> TrainConfig:
    """Config file values, overridden by explicit flags, validated as a TrainConfig.

    With a warm-start checkpoint the encoder shape comes from it; only the depth
    may be reduced.
    """
    raw: Dict[str, Any] = load_config_file(args.config)
    objective = dict(raw.get("objective") or {})
    encoder = dict(raw.get("encoder") or {})
    if base is not None:
        encoder = base.encoder_config.model_dump()

    for attr, key in _OBJECTIVE_FLAGS.items():
        value = getattr(args, attr, None)
        if value is not None:
            objective[key] = value
    for variant in args.variants:
        if variant not in VARIANT_FLAGS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANT_FLAGS)}")
        objective[VARIANT_FLAGS[variant]] = True
    for attr, key in _RUN_FLAGS.items():
        value = getattr(args, attr, None)
        if value is not None:
            raw[key] = value
    if args.n_layers is not None:
        encoder["n_layers"] = args.n_layers

    if args.seed is not None or "seed" not in raw:
        raw["seed"] = get_default_seed(args.seed)
    raw["objective"] = objective
    raw["encoder"] = encoder
    raw.pop("checkpoint_dir", None)

    try:
        return TrainConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc


@run_command
def run(args: argparse.Namespace) -> int:
    base = load_checkpoint(args.init) if args.init else None
    config = resolve_config(args, base)
    pairs = load_train_pairs(args.train)
    inputs = [args.train]
    initial = None
    if base is not None:
        initial = prune_params(base.params, config.encoder.n_layers)
        inputs.append(args.init)
    if base is not None and not args.vocab:
        vocab = base.vocab
    elif args.vocab:
        vocab = load_vocab(args.vocab)
        inputs.append(args.vocab)
    else:
        texts = [t for p in pairs for t in (p.query, p.positive, *p.negatives)]
        vocab = build_vocab(texts, config.encoder.vocab_size)
    if args.config:
        inputs.append(args.config)

    checkpoint = train(config, pairs, vocab, initial=initial)
    target = save_checkpoint(checkpoint, Path(args.out) / CHECKPOINT_FILENAME)
    emit_manifest(args, config.model_dump(mode="json", by_alias=True), config.seed, inputs, [target])
    print(f"checkpoint={target} final_loss={checkpoint.final_loss:.6f}")
    return 0
