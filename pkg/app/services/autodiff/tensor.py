"""Reverse-mode differentiation over numpy arrays.

Every op builds a ``Node`` whose value is computed eagerly. ``forward_eval``
re-runs the recorded graph from its leaves, ``backward`` fills ``grad`` on every
node reachable from a scalar root.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from app.core.errors import GraphError, NonFiniteError, ShapeError

# Tensors are plain numpy arrays; a Node owns one as its cached output.
Tensor = np.ndarray

_dtype = np.float32

_GELU_C = float(np.sqrt(2.0 / np.pi))


def get_dtype() -> type:
    return _dtype


@contextmanager
def precision(dtype: Union[type, str]) -> Iterator[None]:
    """Switch the dtype new leaves and constants are created with."""
    global _dtype
    previous = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = previous


ForwardFn = Callable[..., np.ndarray]
BackwardFn = Callable[..., Tuple[Optional[np.ndarray], ...]]


class Node:
    __slots__ = (
        "op",
        "parents",
        "value",
        "grad",
        "requires_grad",
        "name",
        "_forward",
        "_backward",
    )

    def __init__(
        self,
        op: str,
        parents: Tuple["Node", ...],
        value: np.ndarray,
        forward: Optional[ForwardFn] = None,
        backward: Optional[BackwardFn] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        self.op = op
        self.parents = parents
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._forward = forward
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return mul(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op, "non-finite value in forward result")


def leaf(value, name: Optional[str] = None, requires_grad: bool = True) -> Node:
    """Bind a value as a graph input; the array is copied."""
    array = np.array(value, dtype=_dtype, copy=True)
    _check_finite(name or "leaf", array)
    return Node("leaf", (), array, requires_grad=requires_grad, name=name)


def constant(value, name: Optional[str] = None) -> Node:
    return leaf(value, name=name, requires_grad=False)


def _make(
    op: str,
    parents: Sequence[Node],
    forward: ForwardFn,
    backward: BackwardFn,
) -> Node:
    parents = tuple(parents)
    with np.errstate(all="ignore"):
        value = forward(*(p.value for p in parents))
    _check_finite(op, value)
    requires_grad = op != "detach" and any(p.requires_grad for p in parents)
    return Node(op, parents, value, forward, backward, requires_grad)


def _require_same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    """2-D @ 2-D, 3-D @ 2-D (shared right operand) or batched 3-D @ 3-D."""
    shapes_ok = (
        (a.value.ndim == 2 and b.value.ndim == 2)
        or (a.value.ndim == 3 and b.value.ndim == 2)
        or (a.value.ndim == 3 and b.value.ndim == 3 and a.shape[0] == b.shape[0])
    )
    if not shapes_ok or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def forward(va, vb):
        return va @ vb

    def backward(g, out, va, vb):
        ga = g @ _swap(vb)
        if va.ndim == 3 and vb.ndim == 2:
            gb = va.reshape(-1, va.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _swap(va) @ g
        return ga, gb

    return _make("matmul", (a, b), forward, backward)


def transpose(a: Node) -> Node:
    """Swap the last two axes."""
    if a.value.ndim < 2:
        raise ShapeError(f"transpose: need rank >= 2, got {a.shape}")
    return _make("transpose", (a,), _swap, lambda g, out, va: (_swap(g),))


# -- elementwise --------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may also be a row vector added to every row."""
    bias = b.value.ndim == 1 and a.value.ndim >= 1 and b.shape[0] == a.shape[-1]
    if not bias:
        _require_same_shape("add", a, b)

    def backward(g, out, va, vb):
        if bias and va.ndim > 1:
            return g, g.reshape(-1, g.shape[-1]).sum(axis=0)
        return g, g

    return _make("add", (a, b), lambda va, vb: va + vb, backward)


def sub(a: Node, b: Node) -> Node:
    _require_same_shape("sub", a, b)
    return _make("sub", (a, b), lambda va, vb: va - vb, lambda g, out, va, vb: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _require_same_shape("mul", a, b)
    return _make(
        "mul", (a, b), lambda va, vb: va * vb, lambda g, out, va, vb: (g * vb, g * va)
    )


def scale(a: Node, factor: float) -> Node:
    factor = float(factor)
    return _make(
        "scale",
        (a,),
        lambda va: va * va.dtype.type(factor),
        lambda g, out, va: (g * va.dtype.type(factor),),
    )


def exp(a: Node) -> Node:
    return _make("exp", (a,), np.exp, lambda g, out, va: (g * out,))


def log(a: Node) -> Node:
    return _make("log", (a,), np.log, lambda g, out, va: (g / va,))


def gelu(a: Node) -> Node:
    """GELU, tanh approximation, with its exact derivative."""

    def inner(va):
        return _GELU_C * (va + 0.044715 * va**3)

    def forward(va):
        return 0.5 * va * (1.0 + np.tanh(inner(va)))

    def backward(g, out, va):
        t = np.tanh(inner(va))
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * va**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * va * (1.0 - t * t) * d_inner),)

    return _make("gelu", (a,), forward, backward)


# -- normalizations -----------------------------------------------------------


def row_softmax(a: Node) -> Node:
    """Softmax over the last axis."""

    def forward(va):
        shifted = va - va.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def backward(g, out, va):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("row_softmax", (a,), forward, backward)


def log_softmax(a: Node) -> Node:
    """Log of the softmax over the last axis, via a max-shifted logsumexp.

    Finite wherever the logits are, even when a probability underflows.
    """

    def forward(va):
        shifted = va - va.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g, out, va):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", (a,), forward, backward)


def l2_normalize_rows(a: Node) -> Node:
    def norms(va):
        n = np.sqrt((va * va).sum(axis=-1, keepdims=True))
        if np.any(n == 0):
            raise NonFiniteError("l2_normalize_rows", "zero-norm row")
        return n

    def forward(va):
        return va / norms(va)

    def backward(g, out, va):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms(va),)

    return _make("l2_normalize_rows", (a,), forward, backward)


def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    """Normalize the last axis, then apply the learned gain and bias."""
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            f"layer_norm: gain/bias {gamma.shape}/{beta.shape} do not match width {width}"
        )

    def normalized(vx):
        mu = vx.mean(axis=-1, keepdims=True)
        var = ((vx - mu) ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        return (vx - mu) * inv, inv

    def forward(vx, vg, vb):
        xhat, _ = normalized(vx)
        return xhat * vg + vb

    def backward(g, out, vx, vg, vb):
        xhat, inv = normalized(vx)
        dxhat = g * vg
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, width)
        dgamma = (flat_g * xhat.reshape(-1, width)).sum(axis=0)
        dbeta = flat_g.sum(axis=0)
        return dx, dgamma, dbeta

    return _make("layer_norm", (x, gamma, beta), forward, backward)


# -- indexing and layout ------------------------------------------------------


def embedding(table: Node, ids: np.ndarray) -> Node:
    """Look up rows of ``table``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id range [{ids.min()}, {ids.max()}] outside table of {table.shape[0]} rows"
        )

    def backward(g, out, vt):
        gt = np.zeros_like(vt)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, vt.shape[-1]))
        return (gt,)

    return _make("embedding", (table,), lambda vt: vt[ids], backward)


def masked_mean(x: Node, mask: np.ndarray) -> Node:
    """Average (B, T, D) states over positions where ``mask`` (B, T) is true."""
    mask = np.asarray(mask, dtype=bool)
    if x.value.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(f"masked_mean: mask {mask.shape} does not fit states {x.shape}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ShapeError("masked_mean: a row has no unmasked positions (all-PAD row)")

    def weights(dtype):
        return (mask / counts[:, None]).astype(dtype)[:, :, None]

    def forward(vx):
        return (vx * weights(vx.dtype)).sum(axis=1)

    def backward(g, out, vx):
        return (g[:, None, :] * weights(vx.dtype),)

    return _make("masked_mean", (x,), forward, backward)


def first_token(x: Node) -> Node:
    """Position-0 state of every (B, T, D) sequence."""
    if x.value.ndim != 3:
        raise ShapeError(f"first_token: expected rank 3, got {x.shape}")

    def backward(g, out, vx):
        gx = np.zeros_like(vx)
        gx[:, 0, :] = g
        return (gx,)

    return _make("first_token", (x,), lambda vx: vx[:, 0, :], backward)


def slice_last(a: Node, start: int, stop: int) -> Node:
    """Columns ``start:stop`` of the trailing dimension."""
    width = a.shape[-1]
    if not 0 <= start < stop <= width:
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for width {width}")

    def backward(g, out, va):
        ga = np.zeros_like(va)
        ga[..., start:stop] = g
        return (ga,)

    return _make("slice_last", (a,), lambda va: va[..., start:stop], backward)


def prefix(a: Node, k: int) -> Node:
    """First ``k`` entries of the trailing dimension."""
    return slice_last(a, 0, k)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    if not nodes:
        raise ShapeError("concat: nothing to concatenate")
    ndim = nodes[0].value.ndim
    axis = axis % ndim
    for n in nodes[1:]:
        other = tuple(s for i, s in enumerate(n.shape) if i != axis)
        first = tuple(s for i, s in enumerate(nodes[0].shape) if i != axis)
        if n.value.ndim != ndim or other != first:
            raise ShapeError(f"concat: {n.shape} does not fit {nodes[0].shape} on axis {axis}")
    splits = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def backward(g, out, *values):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", nodes, lambda *vs: np.concatenate(vs, axis=axis), backward)


def split_heads(x: Node, n_heads: int) -> Node:
    """(B, T, D) -> (B * H, T, D / H)."""
    b, t, d = x.shape
    if d % n_heads:
        raise ShapeError(f"split_heads: width {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def forward(vx):
        return vx.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3).reshape(b * n_heads, t, dh)

    def backward(g, out, vx):
        return (g.reshape(b, n_heads, t, dh).transpose(0, 2, 1, 3).reshape(b, t, d),)

    return _make("split_heads", (x,), forward, backward)


def merge_heads(x: Node, n_heads: int) -> Node:
    """(B * H, T, Dh) -> (B, T, H * Dh)."""
    bh, t, dh = x.shape
    if bh % n_heads:
        raise ShapeError(f"merge_heads: leading size {bh} not divisible by {n_heads}")
    b = bh // n_heads

    def forward(vx):
        return vx.reshape(b, n_heads, t, dh).transpose(0, 2, 1, 3).reshape(b, t, n_heads * dh)

    def backward(g, out, vx):
        return (g.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3).reshape(bh, t, dh),)

    return _make("merge_heads", (x,), forward, backward)


# -- reductions and gradient control -------------------------------------------


def sum_all(a: Node) -> Node:
    return _make(
        "sum",
        (a,),
        lambda va: np.asarray(va.sum(), dtype=va.dtype),
        lambda g, out, va: (np.full_like(va, g),),
    )


def mean_all(a: Node) -> Node:
    n = a.value.size

    def backward(g, out, va):
        return (np.full_like(va, g / n),)

    return _make("mean", (a,), lambda va: np.asarray(va.mean(), dtype=va.dtype), backward)


def detach(a: Node) -> Node:
    """Identity forward; blocks every gradient path through it."""
    return _make("detach", (a,), lambda va: np.array(va, copy=True), lambda g, out, va: (None,))


# -- graph execution ----------------------------------------------------------


def topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited: Set[int] = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def forward_eval(root: Node, frozen: Optional[Set[int]] = None) -> np.ndarray:
    """Recompute every interior node from the current leaf values.

    Nodes whose ``id`` is in ``frozen`` keep their cached value.
    """
    frozen = frozen or set()
    for node in topological_order(root):
        if not node.parents or id(node) in frozen:
            continue
        with np.errstate(all="ignore"):
            value = node._forward(*(p.value for p in node.parents))
        _check_finite(node.op, value)
        node.value = value
    return root.value


def backward(root: Node) -> List[Node]:
    """Accumulate d(root)/d(node) into ``grad`` of every node in the graph.

    Returns the leaves that require a gradient.
    """
    if root.value.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")

    order = topological_order(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)

    for node in reversed(order):
        if not node.parents or not node.requires_grad:
            continue
        grads = node._backward(node.grad, node.value, *(p.value for p in node.parents))
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = parent.grad + np.asarray(g, dtype=parent.value.dtype).reshape(
                parent.shape
            )

    return [n for n in order if not n.parents and n.requires_grad]


__all__ = [
    "Tensor",
    "Node",
    "precision",
    "get_dtype",
    "leaf",
    "constant",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "log",
    "gelu",
    "row_softmax",
    "log_softmax",
    "l2_normalize_rows",
    "layer_norm",
    "embedding",
    "masked_mean",
    "first_token",
    "slice_last",
    "prefix",
    "concat",
    "split_heads",
    "merge_heads",
    "sum_all",
    "mean_all",
    "detach",
    "topological_order",
    "forward_eval",
    "backward",
]
