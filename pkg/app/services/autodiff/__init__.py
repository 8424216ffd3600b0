from app.services.autodiff.gradcheck import gradcheck
from app.services.autodiff.tensor import (
    Node,
    Tensor,
    add,
    backward,
    concat,
    constant,
    detach,
    embedding,
    exp,
    first_token,
    forward_eval,
    gelu,
    get_dtype,
    l2_normalize_rows,
    layer_norm,
    leaf,
    log,
    log_softmax,
    masked_mean,
    matmul,
    mean_all,
    merge_heads,
    mul,
    precision,
    prefix,
    row_softmax,
    scale,
    slice_last,
    split_heads,
    sub,
    sum_all,
    topological_order,
    transpose,
)

__all__ = [
    "Node",
    "Tensor",
    "add",
    "backward",
    "concat",
    "constant",
    "detach",
    "embedding",
    "exp",
    "first_token",
    "forward_eval",
    "gelu",
    "get_dtype",
    "gradcheck",
    "l2_normalize_rows",
    "layer_norm",
    "leaf",
    "log",
    "log_softmax",
    "masked_mean",
    "matmul",
    "mean_all",
    "merge_heads",
    "mul",
    "precision",
    "prefix",
    "row_softmax",
    "scale",
    "slice_last",
    "split_heads",
    "sub",
    "sum_all",
    "topological_order",
    "transpose",
]
