"""Numeric core: tensors with reverse-mode autodiff, matrix functions,
seeded randomness and the binary checkpoint format."""

from .checkpoint import load_checkpoint, save_checkpoint
from .linalg import cholesky_logdet, jittered_spd, matexp, zoh_pair
from .rng import Rng
from .tensor import (
    Tensor,
    enable_grad,
    concat,
    div,
    exp,
    expm1_over_x,
    gather,
    getitem,
    grad_of,
    l2norm,
    leaky_relu,
    log,
    logdet_psd,
    matmul,
    mul,
    no_grad,
    reshape,
    segment_sum,
    sigmoid,
    silu,
    softmax,
    softplus,
    solve_quad,
    sqrt,
    stack,
    swapaxes,
    tanh,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "Tensor", "Rng", "no_grad", "enable_grad", "grad_of",
    "concat", "div", "exp", "expm1_over_x", "gather", "getitem", "l2norm",
    "leaky_relu", "log", "logdet_psd", "matmul", "mul", "reshape",
    "segment_sum", "sigmoid", "silu", "softmax", "softplus", "solve_quad",
    "sqrt", "stack", "swapaxes", "tanh", "tmean", "transpose", "tsum",
    "matexp", "cholesky_logdet", "jittered_spd", "zoh_pair",
    "save_checkpoint", "load_checkpoint",
]
