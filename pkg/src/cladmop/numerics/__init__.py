"""Numeric substrate: tape tensors, attention, gradient checking, Adam."""

from .attention import (
    PROJECTION_NAMES,
    AttentionParams,
    multi_head_attention,
    residual_self_attention,
)
from .gradcheck import finite_diff_check
from .optim import Adam
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    backward,
    clip,
    concat_cols,
    concat_rows,
    constant,
    exp,
    gather_rows,
    l2_normalize_rows,
    layer_norm,
    log,
    log_softmax_rows,
    matmul,
    mean_all,
    mean_rows,
    mul,
    neg,
    relu,
    scale,
    sigmoid,
    slice_cols,
    slice_rows,
    softmax_rows,
    sub,
    sum_all,
    transpose,
)

__all__ = [
    "Adam",
    "AttentionParams",
    "PROJECTION_NAMES",
    "Parameter",
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "clip",
    "concat_cols",
    "concat_rows",
    "constant",
    "exp",
    "finite_diff_check",
    "gather_rows",
    "l2_normalize_rows",
    "layer_norm",
    "log",
    "log_softmax_rows",
    "matmul",
    "mean_all",
    "mean_rows",
    "mul",
    "multi_head_attention",
    "neg",
    "relu",
    "residual_self_attention",
    "scale",
    "sigmoid",
    "slice_cols",
    "slice_rows",
    "softmax_rows",
    "sub",
    "sum_all",
    "transpose",
]
