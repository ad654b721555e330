"""Minimal reverse-mode tensor engine on top of numpy."""

from .checkpoint import CheckpointError, load_arrays, save_arrays
from .ops import (  # noqa: F401
    AxisOutOfRangeError,
    activation,
    add,
    concat,
    conv2d,
    div,
    elementwise,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mul,
    power,
    reduce,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    take,
    pad_edge,
    swapaxes,
    tanh,
    transpose,
    unbroadcast,
    upsample_transposed_conv,
)
from .tensor import (
    GradientError,
    NonFiniteError,
    ShapeMismatchError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    default_dtype,
    no_grad,
    precision,
    zero_grads,
)
