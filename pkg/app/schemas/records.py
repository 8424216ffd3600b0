from typing import Dict, List, Literal, Set

from pydantic import BaseModel, ConfigDict, Field


class CorpusRecord(BaseModel):
    model_config = ConfigDict(extra="ignore")

    id: str = Field(..., min_length=1)
    text: str


class QueryRecord(BaseModel):
    model_config = ConfigDict(extra="ignore")

    id: str = Field(..., min_length=1)
    text: str


class StsPair(BaseModel):
    model_config = ConfigDict(extra="ignore")

    s1: str
    s2: str
    score: float


class TrainPair(BaseModel):
    """One query with its positive document and optional hard negatives."""

    model_config = ConfigDict(extra="ignore")

    query: str
    positive: str
    negatives: List[str] = Field(default_factory=list)


RunQrels = Dict[str, Set[str]]


class SubModelSelector(BaseModel):
    """An (layer, dim) operating point, 1-based layer."""

    model_config = ConfigDict(frozen=True)

    layer: int = Field(..., ge=1)
    dim: int = Field(..., ge=1)


class SweepRow(BaseModel):
    objective: str
    layer: int
    dim: int
    metric: str
    value: float
    seed: int


Task = Literal["sts", "retrieval"]
