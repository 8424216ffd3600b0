import argparse
from time import perf_counter

from app.commands.common import int_list, str_list
from app.core.config import get_settings
from app.core.errors import ConfigError, GradcheckFailure, run_command
from app.core.logging import get_logger
from app.services.verification import SUITE, run_suite

logger = get_logger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("gradcheck", help="Float64 gradient checks of every objective")
    parser.add_argument("--seeds", type=int_list, default=[0, 1, 2])
    parser.add_argument("--tolerance", type=float, help="Max relative error (default: GRADCHECK_TOLERANCE)")
    parser.add_argument(
        "--max-coords",
        dest="max_coords",
        type=int,
        help="Coordinates checked per check, 0 for all (default: GRADCHECK_MAX_COORDS)",
    )
    parser.add_argument("--only", type=str_list, help="Subset of objective labels")
    parser.set_defaults(func=run)


@run_command
def run(args: argparse.Namespace) -> int:
    settings = get_settings()
    tolerance = args.tolerance if args.tolerance is not None else settings.GRADCHECK_TOLERANCE
    max_coords = args.max_coords if args.max_coords is not None else settings.GRADCHECK_MAX_COORDS
    known = [label for label, _ in SUITE]
    if args.only:
        unknown = [label for label in args.only if label not in known]
        if unknown:
            raise ConfigError(f"unknown objective labels {unknown}; choose from {known}")

    start = perf_counter()
    results = run_suite(args.seeds, tolerance, max_coords=max_coords, labels=args.only)
    elapsed = perf_counter() - start

    labels = list(dict.fromkeys(r.label for r in results))
    for label in labels:
        rows = [r for r in results if r.label == label]
        worst = max(r.max_error for r in rows)
        status = "PASS" if all(r.passed for r in rows) else "FAIL"
        print(f"{label:<14} max_rel_err={worst:.3e} seeds={len(rows)} {status}")

    failed = [r for r in results if not r.passed]
    logger.info("gradcheck: %d checks in %.1fs, %d failed", len(results), elapsed, len(failed))
    if failed:
        names = ", ".join(f"{r.label}@seed{r.seed}" for r in failed)
        raise GradcheckFailure(f"{len(failed)} gradient checks above tolerance {tolerance:g}: {names}")
    return 0
