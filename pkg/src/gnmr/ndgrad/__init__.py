"""Minimal float64 tensor arithmetic with reverse-mode gradients and Adam."""
from .optim import AdamState, adam_step
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    add_bias,
    backward,
    concat,
    exp,
    matmul,
    mul,
    relu,
    reshape,
    segment_sum,
    softmax,
    stack,
    sub,
    sum,
    sum_squares,
    take_rows,
    transpose,
)

__all__ = [
    "AdamState", "NonFiniteError", "ShapeError", "Tape", "TapeError", "Tensor",
    "adam_step", "add", "add_bias", "backward", "concat", "exp", "matmul", "mul",
    "relu", "reshape", "segment_sum", "softmax", "stack", "sub", "sum",
    "sum_squares", "take_rows", "transpose",
]
