import argparse

from app.core.errors import WorkbenchError, run_command
from app.core.logging import get_logger
from app.core.manifest import load_manifest
from app.core.runtime import file_digest

logger = get_logger(__name__)


class ReplayMismatch(WorkbenchError):
    """Raised when a replayed command produces different output bytes."""


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("replay", help="Re-run the command recorded in a manifest and compare outputs")
    parser.add_argument("manifest", help="Path to a *.manifest.json file")
    parser.set_defaults(func=run)


@run_command
def run(args: argparse.Namespace) -> int:
    from app.main import main

    manifest = load_manifest(args.manifest)
    if not manifest.command or manifest.command[0] == "replay":
        raise WorkbenchError(f"{args.manifest}: manifest does not record a replayable command")

    changed_inputs = [p for p, digest in manifest.inputs.items() if file_digest(p) != digest]
    if changed_inputs:
        logger.warning("Inputs changed since the manifest was written: %s", changed_inputs)

    logger.info("Replaying: %s", " ".join(manifest.command))
    status = main(list(manifest.command))
    if status != 0:
        return status

    mismatched = [p for p, digest in manifest.outputs.items() if file_digest(p) != digest]
    if mismatched:
        raise ReplayMismatch(f"replayed outputs differ from the manifest: {mismatched}")
    print(f"replay OK: {len(manifest.outputs)} outputs byte-identical")
    return 0
