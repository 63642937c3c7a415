"""Minimal reverse-mode autodiff over numpy arrays."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .optim import average_grads, clip_grad_norm, grad_norm, sgd_step
from .tensor import (
    Tensor,
    add,
    clip_min,
    concat,
    conv2d,
    conv2d_transpose,
    div,
    exp,
    gather_last,
    getitem,
    is_grad_enabled,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    scatter_add_last,
    sigmoid,
    slice_axis,
    softmax,
    split,
    sqrt,
    square,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)
