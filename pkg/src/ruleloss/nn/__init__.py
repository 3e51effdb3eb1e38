"""Minimal neural-network stack: autodiff, MLP regressor, optimizer."""

from __future__ import annotations

from .autodiff import DimensionMismatch, Tensor, as_tensor, concat, parameter
from .mlp import DropoutMasks, ForwardTrace, MlpRegressor, load_checkpoint, save_checkpoint
from .optim import AdamW, clip_grad_norm, lr_schedule

__all__ = [
    "AdamW", "DimensionMismatch", "DropoutMasks", "ForwardTrace", "MlpRegressor", "Tensor",
    "as_tensor", "clip_grad_norm", "concat", "load_checkpoint", "lr_schedule", "parameter",
    "save_checkpoint",
]
