"""Minimal numerical substrate: autodiff tensors, layers, AdamW and EMA."""
from .tensor import (
    ShapeError,
    Tensor,
    add,
    attention,
    causal_mask,
    concat,
    embedding,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    softmax_cross_entropy,
    squared_error,
    sub,
    tanh,
    transpose,
    tsum,
)
from .optim import EMA, AdamW, NonFiniteGradient, scaled_lr
from .transformer import TransformerConfig, init_params

__all__ = [
    "ShapeError", "Tensor", "add", "attention", "causal_mask", "concat", "embedding", "gelu",
    "layer_norm", "log_softmax", "matmul", "mean", "mul", "relu", "reshape",
    "softmax_cross_entropy", "squared_error", "sub", "tanh", "transpose", "tsum",
    "EMA", "AdamW", "NonFiniteGradient", "scaled_lr", "TransformerConfig", "init_params",
]
