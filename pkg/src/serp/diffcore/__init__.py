"""Minimal reverse-mode differentiation core: tensors, layers, AdamW, gradient checks."""

from . import tensor as F
from .gradcheck import finite_diff_check
from .nn import (
    MLP,
    AttentionBlock,
    LayerNorm,
    Linear,
    Module,
    MultiHeadSelfAttention,
    Parameter,
    SharedMLPMax,
)
from .optim import AdamW, OptimizerState, OptimizerStateError, adamw_step, cosine_lr
from .tensor import Tensor, no_grad, stop_gradient, straight_through, tensor

__all__ = [
    "F",
    "MLP",
    "AdamW",
    "AttentionBlock",
    "LayerNorm",
    "Linear",
    "Module",
    "MultiHeadSelfAttention",
    "OptimizerState",
    "OptimizerStateError",
    "Parameter",
    "SharedMLPMax",
    "Tensor",
    "adamw_step",
    "cosine_lr",
    "finite_diff_check",
    "no_grad",
    "stop_gradient",
    "straight_through",
    "tensor",
]
