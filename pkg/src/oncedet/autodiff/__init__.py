"""Minimal NCHW tensor library with reverse-mode autodiff."""

from . import functional
from .functional import (
    concat,
    conv2d,
    conv_transpose2d,
    global_avg_pool,
    group_norm,
    l1_loss,
    relu,
    set_mean,
    sigmoid,
)
from .optim import OptimizerState, adam, sgd, step, zero_grad
from .serialization import checksum, load_tensors, save_tensors
from .tensor import NonFiniteError, Tape, Tensor, active_tape, backward, count_ops

__all__ = [
    "NonFiniteError",
    "OptimizerState",
    "Tape",
    "Tensor",
    "active_tape",
    "adam",
    "backward",
    "checksum",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "count_ops",
    "functional",
    "global_avg_pool",
    "group_norm",
    "l1_loss",
    "load_tensors",
    "relu",
    "save_tensors",
    "set_mean",
    "sgd",
    "sigmoid",
    "step",
    "zero_grad",
]
