"""Tensor, autodiff tape, Adam, seeded streams and a gradient checker."""

from . import kernels
from .gradcheck import GradCheckReport, finite_diff_check
from .optim import AdamState, adam_step, zero_grad
from .rng import RngState
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    add,
    backward,
    causal_softmax,
    clip,
    concat,
    cross_entropy,
    embedding,
    exp,
    gather,
    gelu,
    layer_norm,
    log,
    log_sigmoid,
    log_softmax,
    matmul,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    reset_tape,
    reshape,
    slice_,
    softmax,
    square,
    sum_,
    transpose,
)

__all__ = [
    "AdamState",
    "GradCheckReport",
    "NumericError",
    "RngState",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "causal_softmax",
    "clip",
    "concat",
    "cross_entropy",
    "embedding",
    "exp",
    "finite_diff_check",
    "gather",
    "gelu",
    "kernels",
    "layer_norm",
    "log",
    "log_sigmoid",
    "log_softmax",
    "matmul",
    "mean",
    "minimum",
    "mul",
    "neg",
    "no_grad",
    "reset_tape",
    "reshape",
    "slice_",
    "softmax",
    "square",
    "sum_",
    "transpose",
    "zero_grad",
]
