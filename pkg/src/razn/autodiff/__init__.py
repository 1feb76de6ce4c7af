"""Minimal differentiable-operation substrate: tensors, ops, parameters, Adam."""

from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .ops import (
    add,
    batchnorm2d,
    bilinear_resize,
    conv2d,
    cross_entropy_per_image,
    global_avg_pool,
    interp_matrix,
    linear,
    log,
    max_pool2d,
    mean,
    mul,
    one_hot,
    record_macs,
    relu,
    sigmoid,
    softmax_cross_entropy_map,
    sub,
)
from .optim import LrSchedule, adam_step, lr_at
from .params import ParamStore
from .tensor import DEFAULT_DTYPE, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "DEFAULT_DTYPE",
    "LrSchedule",
    "ParamStore",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "batchnorm2d",
    "bilinear_resize",
    "conv2d",
    "cross_entropy_per_image",
    "global_avg_pool",
    "interp_matrix",
    "is_grad_enabled",
    "linear",
    "load_checkpoint",
    "log",
    "lr_at",
    "max_pool2d",
    "mean",
    "mul",
    "no_grad",
    "one_hot",
    "read_header",
    "record_macs",
    "relu",
    "save_checkpoint",
    "sigmoid",
    "softmax_cross_entropy_map",
    "sub",
]
