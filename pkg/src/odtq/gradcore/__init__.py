"""Minimal reverse-mode autodiff, parameter store and optimizer."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import check_grad, numerical_grad, relative_error
from .optim import ParamStore, clip_grad_norm, optimizer_step
from .tensor import (
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    batched_linear,
    concat,
    div,
    exp,
    gather_rows,
    index,
    is_recording,
    log,
    log_softmax_masked,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    pick,
    relu,
    reshape,
    sigmoid,
    softmax_masked,
    softplus,
    stack,
    sub,
    sum_,
    tanh,
)

__all__ = [
    "ParamStore", "Tensor", "abs_", "add", "as_tensor", "backward", "batched_linear",
    "check_grad", "clip_grad_norm", "concat", "div", "exp", "gather_rows", "index",
    "is_recording", "load_checkpoint", "log", "log_softmax_masked", "matmul", "mean",
    "mul", "neg", "no_grad", "numerical_grad", "optimizer_step", "pick",
    "relative_error", "relu", "reshape", "save_checkpoint", "sigmoid", "softmax_masked",
    "softplus", "stack", "sub", "sum_", "tanh",
]
