"""Minimal reverse-mode autodiff engine (numpy backed)."""

from .functional import (
    concat,
    conv2d,
    conv3d,
    conv_transpose2d,
    conv_transpose3d,
    dropblock3d,
    dropout,
    expand_depth,
    maxpool2d,
    maxpool3d,
    mean_depth,
    relu,
    sigmoid,
    split_channels,
)
from .gradcheck import GradCheckReport, grad_check
from .losses import bce_loss, kl_diag_gauss, mse_loss, reparam_sample
from .optim import Adam, AdamState, adam_step
from .rng import RngState
from .tensor import Tensor, no_grad, parameter

__all__ = [
    "Tensor",
    "RngState",
    "no_grad",
    "parameter",
    "conv3d",
    "conv2d",
    "conv_transpose3d",
    "conv_transpose2d",
    "maxpool3d",
    "maxpool2d",
    "relu",
    "sigmoid",
    "dropout",
    "dropblock3d",
    "concat",
    "split_channels",
    "expand_depth",
    "mean_depth",
    "bce_loss",
    "mse_loss",
    "kl_diag_gauss",
    "reparam_sample",
    "Adam",
    "AdamState",
    "adam_step",
    "grad_check",
    "GradCheckReport",
]
