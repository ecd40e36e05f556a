"""Minimal dense-tensor engine: float64 arrays, reverse-mode autodiff, SGD."""

from .kernels import BACKEND, use_backend
from .optim import SGD, zero_grads
from .tensor import (
    GraphError,
    ShapeError,
    Tensor,
    add,
    add_bias,
    as_tensor,
    avg_pool2d,
    channel_affine,
    conv2d,
    flatten,
    is_grad_enabled,
    log_softmax,
    matmul,
    mul,
    neg,
    no_grad,
    pad_channels,
    relu,
    reshape,
    set_debug,
    softmax,
    softmax_cross_entropy,
    spatial_mean,
    square,
    sub,
    tmean,
    tsum,
)

__all__ = [
    "BACKEND", "use_backend", "SGD", "zero_grads", "GraphError", "ShapeError", "Tensor", "add", "add_bias",
    "as_tensor", "avg_pool2d", "channel_affine", "conv2d", "flatten", "is_grad_enabled",
    "log_softmax", "matmul", "mul", "neg", "no_grad", "pad_channels", "relu", "reshape",
    "set_debug", "softmax", "softmax_cross_entropy", "spatial_mean", "square", "sub",
    "tmean", "tsum",
]
