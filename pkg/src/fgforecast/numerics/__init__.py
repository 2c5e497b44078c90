"""Minimal float64 differentiable-computation core."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, gradient_check
from .layers import (
    LSTM,
    MLP,
    GCNLayer,
    Linear,
    Module,
    gcn_forward,
    lstm_sequence,
    mlp_forward,
    normalize_adjacency,
)
from .losses import mse_loss
from .optim import AdamW, AdamWState, adamw_step
from .tensor import (
    GradientTape,
    NonFiniteError,
    Parameter,
    Tensor,
    backward,
    concat,
    matmul,
    relu,
    sigmoid,
    spmm,
    stack,
    tanh,
)

__all__ = [
    "AdamW", "AdamWState", "GCNLayer", "GradCheckReport", "GradientTape", "LSTM", "Linear", "MLP",
    "Module", "NonFiniteError", "Parameter", "Tensor", "adamw_step", "backward", "concat",
    "gcn_forward", "gradient_check", "load_checkpoint", "lstm_sequence", "matmul", "mlp_forward", "mse_loss",
    "normalize_adjacency", "relu", "save_checkpoint", "sigmoid", "spmm", "stack", "tanh",
]
