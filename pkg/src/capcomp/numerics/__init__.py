"""Minimal f64 tensor algebra with tape-based reverse-mode autodiff."""

from . import ops
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    add,
    attention,
    attention_weights,
    concat,
    exp,
    gelu,
    layer_norm,
    log,
    log_sigmoid,
    log_softmax,
    matmul,
    mean,
    mul,
    pick,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    take,
    tanh,
    transpose,
)
from .ops import sum as tsum
from .tensor import (
    NonFiniteError,
    NumericsError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    active_tape,
    as_tensor,
    backward,
)

__all__ = [
    "GradCheckReport", "NonFiniteError", "NumericsError", "ShapeError", "Tape", "TapeError",
    "Tensor", "active_tape", "add", "as_tensor", "attention", "attention_weights", "backward",
    "concat", "exp", "gelu", "grad_check", "layer_norm", "log", "log_sigmoid", "log_softmax",
    "matmul", "mean", "mul", "ops", "pick", "relu", "reshape", "sigmoid", "softmax", "sub",
    "take", "tanh", "transpose", "tsum",
]
