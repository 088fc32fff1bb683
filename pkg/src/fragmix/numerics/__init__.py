"""Minimal dense tensors with reverse-mode autodiff."""

from . import functional
from .functional import (
    add,
    clamp_min,
    conv2d,
    dropout,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    softmax,
    sqrt,
    square,
    star_relu,
    take,
    transpose,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, as_tensor, grad_enabled, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "clamp_min",
    "conv2d",
    "dropout",
    "functional",
    "grad_enabled",
    "l2_normalize",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "sqrt",
    "square",
    "star_relu",
    "take",
    "transpose",
]
