import os
from functools import lru_cache
from typing import Optional

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

# Load environment variables from a local .env file if present
load_dotenv()


class Settings(BaseSettings):
    """Workbench settings loaded from environment variables."""

    # App
    APP_NAME: str = Field(default="matryoshka-2d-workbench")
    APP_VERSION: str = Field(default="0.1.0")

    # Logging
    LOG_LEVEL: str = Field(default="INFO", description="Application log level")

    # Reproducibility
    MSE2D_SEED: int = Field(
        default=0,
        ge=0,
        description="Default seed used when a command is not given --seed",
    )

    # Training
    LOG_EVERY: int = Field(
        default=10,
        ge=1,
        description="Trainer logs the loss every LOG_EVERY steps",
    )

    # Evaluation
    EVAL_BATCH_SIZE: int = Field(
        default=64,
        ge=1,
        le=4096,
        description="Number of texts encoded per forward pass during evaluation",
    )

    # Gradient checks
    GRADCHECK_TOLERANCE: float = Field(
        default=1e-4,
        gt=0.0,
        description="Maximum relative error accepted by the gradcheck command",
    )
    GRADCHECK_MAX_COORDS: int = Field(
        default=256,
        ge=0,
        description=(
            "Cap on the number of parameter coordinates checked per gradcheck; "
            "0 checks every coordinate."
        ),
    )

    # Encoding cache
    CACHE_ENABLED: bool = Field(
        default=True,
        description="Cache per-layer corpus encodings across sweep cells when true.",
    )
    CACHE_MAX_ENTRIES: int = Field(default=64, ge=1)

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Return a cached Settings instance."""
    return Settings()


def get_env_bool(name: str, default: bool = False) -> bool:
    """Utility to parse boolean flags from environment variables."""
    raw: Optional[str] = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in {"1", "true", "yes", "on"}
