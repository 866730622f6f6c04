"""Minimal reverse-mode differentiation layer used by the estimator networks."""

from .layers import LSTM, Conv1D, Dense, Module, conv1d, glorot, lstm_cell, parameter
from .optim import Adam, CosineDecay, OptimizerState, TrainingAborted
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    elu,
    exp,
    getitem,
    grad,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    precision,
    reshape,
    sigmoid,
    soft_clamp,
    square,
    stack,
    sub,
    take,
    tanh,
    tsum,
)

__all__ = [
    "Adam", "Conv1D", "CosineDecay", "Dense", "LSTM", "Module", "NonFiniteError",
    "OptimizerState", "Tensor", "TrainingAborted", "add", "as_tensor", "concat", "conv1d",
    "div", "elu", "exp", "getitem", "glorot", "grad", "is_grad_enabled", "log", "lstm_cell",
    "matmul", "mean", "mul", "no_grad", "parameter", "precision", "reshape", "sigmoid",
    "soft_clamp", "square", "stack", "sub", "take", "tanh", "tsum",
]
