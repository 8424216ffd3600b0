from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from app.core.errors import GraphError, NonFiniteError
from app.core.logging import get_logger
from app.services.autodiff.tensor import (
    Node,
    backward,
    forward_eval,
    leaf,
    precision,
    topological_order,
)

logger = get_logger(__name__)

Point = Union[np.ndarray, Mapping[str, np.ndarray]]
GraphFn = Callable[..., Node]


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def gradcheck(
    fn: GraphFn,
    point: Point,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare backward against central differences at ``point``.

    ``fn`` receives a leaf built from ``point`` (or a dict of leaves when
    ``point`` is a mapping) and returns a scalar root. Runs in float64.
    Gradient-blocked nodes keep their unperturbed values under perturbation, so the
    numeric side differentiates the same function backward does.

    Returns the maximum over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    with precision(np.float64):
        if isinstance(point, Mapping):
            leaves: Dict[str, Node] = {
                name: leaf(np.asarray(value, dtype=np.float64), name=name)
                for name, value in point.items()
            }
            root = fn(leaves)
            inputs: List[Node] = list(leaves.values())
        else:
            x = leaf(np.asarray(point, dtype=np.float64), name="x")
            root = fn(x)
            inputs = [x]

        if root.value.size != 1:
            raise GraphError(f"gradcheck needs a scalar function, got shape {root.shape}")

        backward(root)
        analytic = {id(n): np.array(n.grad, copy=True) for n in inputs}
        frozen = {id(n) for n in topological_order(root) if n.op == "detach"}

        coords: List[Tuple[Node, int]] = [(n, j) for n in inputs for j in range(n.value.size)]
        if max_coords and len(coords) > max_coords:
            rng = np.random.default_rng(seed)
            picked = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
            coords = [coords[i] for i in picked]

        worst = 0.0
        for node, j in coords:
            flat = node.value.reshape(-1)
            original = flat[j]
            flat[j] = original + eps
            f_plus = float(forward_eval(root, frozen))
            flat[j] = original - eps
            f_minus = float(forward_eval(root, frozen))
            flat[j] = original

            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[id(node)].reshape(-1)[j])
            if not (np.isfinite(a) and np.isfinite(numeric)):
                raise NonFiniteError(
                    node.name or "gradcheck", f"non-finite gradient at coordinate {j}"
                )
            worst = max(worst, _relative_error(a, numeric))

        forward_eval(root, frozen)

    logger.debug("gradcheck checked %d coordinates, max relative error %.3e", len(coords), worst)
    return worst


__all__ = ["gradcheck"]
