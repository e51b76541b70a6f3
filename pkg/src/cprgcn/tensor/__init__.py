"""Reverse-mode differentiation engine, layers, Adam and checkpoints."""

from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import (
    DimensionError,
    Tensor,
    concat,
    is_grad_enabled,
    matmul,
    no_grad,
    relu,
    sigmoid,
    stack,
    tanh,
    tensor,
    where_mask,
)
from .gradcheck import check_gradients, numeric_gradient, relative_error
from .ops import (
    InvalidLabelError,
    UnsupportedConfigurationError,
    conv3d,
    log_softmax,
    lstm_cell,
    maxpool3d,
    softmax_cross_entropy,
)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam",
    "AdamState",
    "DimensionError",
    "InvalidLabelError",
    "Tensor",
    "UnsupportedConfigurationError",
    "adam_step",
    "check_gradients",
    "concat",
    "conv3d",
    "is_grad_enabled",
    "kernels",
    "load_checkpoint",
    "log_softmax",
    "lstm_cell",
    "matmul",
    "maxpool3d",
    "no_grad",
    "numeric_gradient",
    "relative_error",
    "relu",
    "save_checkpoint",
    "sigmoid",
    "softmax_cross_entropy",
    "stack",
    "tanh",
    "tensor",
    "where_mask",
]
