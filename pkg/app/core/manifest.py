from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import orjson
from pydantic import BaseModel, Field

from app.core.config import get_settings
from app.core.logging import get_logger
from app.core.runtime import file_digest

logger = get_logger(__name__)

MANIFEST_SUFFIX = ".manifest.json"


class RunManifest(BaseModel):
    """Everything needed to reproduce an artifact-producing command."""

    command: List[str] = Field(..., description="argv of the command, without the program name")
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: int
    inputs: Dict[str, str] = Field(
        default_factory=dict, description="input path -> sha256 of its bytes"
    )
    outputs: Dict[str, str] = Field(
        default_factory=dict, description="output path -> sha256 of its bytes"
    )
    tool_version: str


def manifest_path_for(output: Union[str, Path]) -> Path:
    return Path(f"{output}{MANIFEST_SUFFIX}")


def build_manifest(
    command: Sequence[str],
    config: Dict[str, Any],
    seed: int,
    inputs: Sequence[Union[str, Path]],
    outputs: Sequence[Union[str, Path]],
) -> RunManifest:
    """Digest inputs and outputs and assemble a manifest."""
    return RunManifest(
        command=list(command),
        config=config,
        seed=seed,
        inputs={str(p): file_digest(p) for p in inputs},
        outputs={str(p): file_digest(p) for p in outputs},
        tool_version=get_settings().APP_VERSION,
    )


def write_manifest(manifest: RunManifest, path: Union[str, Path]) -> Path:
    """Write a manifest as deterministic JSON (sorted keys, indented)."""
    target = Path(path)
    payload = orjson.dumps(
        manifest.model_dump(mode="json"),
        option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS,
    )
    target.write_bytes(payload + b"\n")
    logger.info("Wrote run manifest %s", target)
    return target


def load_manifest(path: Union[str, Path]) -> RunManifest:
    return RunManifest.model_validate(orjson.loads(Path(path).read_bytes()))
