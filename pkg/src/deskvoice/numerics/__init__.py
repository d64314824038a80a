"""Tensor autodiff engine, optimizer, gradient checking, checkpoint I/O."""

from .tensor import (
    ComputeGraph,
    Tensor,
    add,
    attention,
    check_finite,
    concat,
    conv1d,
    default_dtype,
    depthwise_conv1d,
    dropout,
    embedding,
    exp,
    expand,
    gelu,
    gradcheck_mode,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mul,
    ones,
    pad_axis,
    power,
    randn,
    reduce_mean,
    reduce_sum,
    relu,
    repeat_rows,
    reshape,
    sigmoid,
    softmax,
    sub,
    swapaxes,
    take_slice,
    tanh,
    tensor,
    upsample_repeat,
    use_dtype,
    zeros,
)
from .optim import Adam, cosine_lr
from .checkpoint import load_tensors, save_tensors, sidecar_path
from .gradcheck import check_gradients, numeric_grad, relative_error

__all__ = [
    "Adam", "ComputeGraph", "Tensor", "add", "attention", "check_finite",
    "check_gradients", "concat", "conv1d", "cosine_lr", "default_dtype",
    "depthwise_conv1d", "dropout", "embedding", "exp", "expand", "gelu",
    "gradcheck_mode",
    "layer_norm", "load_tensors", "log", "log_softmax", "matmul", "mul",
    "numeric_grad", "ones", "pad_axis", "power", "randn", "reduce_mean",
    "reduce_sum", "relative_error", "relu", "repeat_rows", "reshape",
    "save_tensors", "sidecar_path", "sigmoid", "softmax", "sub", "swapaxes",
    "take_slice", "tanh", "tensor", "upsample_repeat", "use_dtype", "zeros",
]
