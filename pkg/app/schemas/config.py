from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ObjectiveKind = Literal["full", "mse", "v1", "v2"]
PoolingMode = Literal["mean", "first"]


class EncoderConfig(BaseModel):
    """Shape of the toy transformer encoder."""

    model_config = ConfigDict(extra="forbid")

    vocab_size: int = Field(default=512, ge=2, description="Includes [PAD]=0 and [UNK]=1")
    d_model: int = Field(default=64, ge=1, description="Full embedding dimension")
    n_layers: int = Field(default=4, ge=1)
    n_heads: int = Field(default=4, ge=1)
    d_ff: int = Field(default=128, ge=1)
    max_seq_len: int = Field(default=128, ge=1)
    pooling: PoolingMode = Field(default="mean")

    @model_validator(mode="after")
    def _heads_divide_model(self) -> "EncoderConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        return self


class ObjectiveConfig(BaseModel):
    """Which training objective runs and with which knobs."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    kind: ObjectiveKind = Field(default="v2")
    dims: List[int] = Field(
        default_factory=lambda: [8, 16, 32, 64],
        description="Ascending Matryoshka dimension set",
    )
    target_dim: int = Field(
        default=16, ge=1, description="Single target dimension of V2 without +DIMS"
    )
    lambda_kld: float = Field(default=1.0, alias="lambda", ge=0.0)
    alpha: float = Field(default=1.0, ge=0.0)
    beta: float = Field(default=1.0, ge=0.0)
    temperature: float = Field(default=0.05, gt=0.0)

    # V2 variants
    score: bool = Field(default=False, description="Score-alignment dimension loss")
    full_dim: bool = Field(default=False, description="Full-dimension loss at every layer")
    fix_doc: bool = Field(default=False, description="Documents always from the full model")
    plus_dims: bool = Field(default=False, description="Train every size in dims, not target_dim")

    kld_teacher: Literal["complete", "partial"] = Field(
        default="complete",
        description=(
            "Side of every KLD term that is gradient-blocked: the last-layer/full-dim "
            "representation ('complete') or the sub-layer/truncated one ('partial')"
        ),
    )
    v1_dim_mode: Literal["all", "full", "sample"] = Field(default="all")
    pca_fit: Literal["per-batch"] = Field(default="per-batch")
    seed: int = Field(default=0, ge=0)

    @field_validator("dims")
    @classmethod
    def _dims_ascending(cls, dims: List[int]) -> List[int]:
        if not dims:
            raise ValueError("dims must not be empty")
        if any(k < 1 for k in dims):
            raise ValueError("dims must be positive")
        if any(b <= a for a, b in zip(dims, dims[1:])):
            raise ValueError(f"dims must be strictly ascending, got {dims}")
        return dims

    @model_validator(mode="after")
    def _variants_need_v2(self) -> "ObjectiveConfig":
        flagged = [
            name
            for name in ("score", "full_dim", "fix_doc", "plus_dims")
            if getattr(self, name)
        ]
        if flagged and self.kind != "v2":
            raise ValueError(f"variants {flagged} require kind 'v2', got '{self.kind}'")
        return self

    def v2_dims(self) -> List[int]:
        """Target dimensions the V2 layer and dim losses sum over."""
        return list(self.dims) if self.plus_dims else [self.target_dim]

    def check_model_width(self, d_model: int) -> None:
        too_wide = [k for k in self.dims if k > d_model]
        if too_wide:
            raise ValueError(f"dims {too_wide} exceed d_model={d_model}")
        if self.target_dim > d_model:
            raise ValueError(f"target_dim={self.target_dim} exceeds d_model={d_model}")


class TrainConfig(BaseModel):
    """A complete, reproducible training run description."""

    model_config = ConfigDict(extra="forbid")

    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    adam_beta1: float = Field(default=0.9, gt=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, gt=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    steps: int = Field(default=100, ge=1)
    batch_size: int = Field(default=16, ge=1)
    seed: int = Field(default=0, ge=0)
    checkpoint_dir: Optional[str] = Field(default=None)

    @model_validator(mode="after")
    def _objective_fits_encoder(self) -> "TrainConfig":
        self.objective.check_model_width(self.encoder.d_model)
        if self.objective.kind == "v1" and self.encoder.n_layers < 2:
            raise ValueError("objective 'v1' needs an encoder with at least 2 layers")
        return self
