from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from app.core.errors import NonFiniteError, ShapeError
from app.services.encoder import EncoderParams


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First and second moments per parameter name, and the step counter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "AdamState":
        return cls(
            m={n: np.zeros_like(a) for n, a in params.tensors.items()},
            v={n: np.zeros_like(a) for n, a in params.tensors.items()},
            t=0,
        )


def adam_step(
    params: EncoderParams,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
) -> Tuple[EncoderParams, AdamState]:
    """Bias-corrected Adam; returns new params and state, inputs untouched.

    A non-finite gradient aborts the step before anything is updated.
    """
    for name, value in params.tensors.items():
        g = grads.get(name)
        if g is None or g.shape != value.shape:
            raise ShapeError(f"gradient for {name} missing or mis-shaped")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(name, f"non-finite gradient at optimizer step {state.t + 1}")

    t = state.t + 1
    b1, b2 = hyper.beta1, hyper.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t

    new_tensors: Dict[str, np.ndarray] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, value in params.tensors.items():
        g = np.asarray(grads[name], dtype=value.dtype)
        m = (b1 * state.m[name] + (1.0 - b1) * g).astype(value.dtype)
        v = (b2 * state.v[name] + (1.0 - b2) * g * g).astype(value.dtype)
        m_hat = m / correction1
        v_hat = v / correction2
        new_tensors[name] = (value - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)).astype(value.dtype)
        new_m[name] = m
        new_v[name] = v

    return EncoderParams(params.config, new_tensors), AdamState(new_m, new_v, t)
