"""Small reverse-mode autodiff engine over numpy arrays."""

from .conv import conv2d, conv_transpose2d
from .optim import Adam, AdamState, NonFiniteGradient, adam_step
from .tensor import (
    GraphError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    bce_with_logits,
    concat,
    default_dtype,
    div,
    exp,
    group_norm,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    pad2d,
    power,
    precision,
    relu,
    reshape,
    sigmoid,
    silu,
    slice_,
    softmax,
    sqrt,
    sub,
    sum_,
    take,
    tanh,
    transpose,
)

__all__ = [
    "Adam",
    "AdamState",
    "GraphError",
    "NonFiniteGradient",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "bce_with_logits",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "default_dtype",
    "div",
    "exp",
    "group_norm",
    "layer_norm",
    "log",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "pad2d",
    "power",
    "precision",
    "relu",
    "reshape",
    "sigmoid",
    "silu",
    "slice_",
    "softmax",
    "sqrt",
    "sub",
    "sum_",
    "take",
    "tanh",
    "transpose",
]
