"""Minimal float64 tensor library with reverse-mode autodiff."""

from .functional import (
    UndefinedRowError,
    concat,
    dropout,
    gather_rows,
    gelu,
    layer_norm,
    linear,
    logsumexp,
    masked_fill,
    matmul,
    mse,
    scatter_add_rows,
    softmax,
)
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, parameter
from .optim import AdamW, OptimizerConfig, cosine_lr
from .tensor import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    exp,
    is_grad_enabled,
    log,
    no_grad,
    square,
)

__all__ = [
    "AdamW",
    "FeedForward",
    "GraphError",
    "LayerNorm",
    "Linear",
    "Module",
    "MultiHeadAttention",
    "NonFiniteError",
    "OptimizerConfig",
    "ShapeError",
    "Tensor",
    "UndefinedRowError",
    "as_tensor",
    "backward",
    "concat",
    "cosine_lr",
    "dropout",
    "exp",
    "gather_rows",
    "gelu",
    "is_grad_enabled",
    "layer_norm",
    "linear",
    "log",
    "logsumexp",
    "masked_fill",
    "matmul",
    "mse",
    "no_grad",
    "parameter",
    "scatter_add_rows",
    "softmax",
    "square",
]
