"""Minimal dense-tensor core with reverse-mode autodiff."""

from .tensor import Tensor, ShapeError, set_check_finite, check_finite_enabled
from .ops import (
    add, sub, mul, neg, scale, add_scalar,
    log, exp, tanh, sigmoid, leaky_relu, softmax,
    sum_all, mean_all, reshape, concat, crop, pick,
    fully_connected, add_channel_bias, conv2d, deconv2d,
    GRUParams, gru_cell, gru_param_init,
)
from .optim import Adam
from .gradcheck import finite_diff_check
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError

__all__ = [
    "Tensor", "ShapeError", "set_check_finite", "check_finite_enabled",
    "add", "sub", "mul", "neg", "scale", "add_scalar",
    "log", "exp", "tanh", "sigmoid", "leaky_relu", "softmax",
    "sum_all", "mean_all", "reshape", "concat", "crop", "pick",
    "fully_connected", "add_channel_bias", "conv2d", "deconv2d",
    "GRUParams", "gru_cell", "gru_param_init",
    "Adam", "finite_diff_check",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]
