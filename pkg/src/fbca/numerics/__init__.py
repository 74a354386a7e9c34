"""Dense tensor engine with reverse-mode autodiff and layer primitives."""

from . import functional
from .counters import count_macs
from .functional import (
    absolute,
    batch_norm,
    bce_with_logits,
    concat,
    concat_channels,
    conv2d,
    flatten,
    global_avg_pool,
    hardswish,
    leaky_relu,
    linear,
    nearest_upsample2x,
    relu,
    sigmoid,
    split,
)
from .gradcheck import GradReport, gradcheck, relative_error
from .module import Conv2d, ConvBnAct, MlpGate, Module
from .rng import RngStream
from .serialize import load_weights, save_weights
from .tensor import GraphError, NonFiniteError, Tensor, add, matmul, mul, no_grad, sub

__all__ = [
    "Conv2d",
    "ConvBnAct",
    "GradReport",
    "GraphError",
    "MlpGate",
    "Module",
    "NonFiniteError",
    "RngStream",
    "Tensor",
    "absolute",
    "add",
    "batch_norm",
    "bce_with_logits",
    "concat",
    "concat_channels",
    "conv2d",
    "count_macs",
    "flatten",
    "functional",
    "global_avg_pool",
    "gradcheck",
    "hardswish",
    "leaky_relu",
    "linear",
    "load_weights",
    "matmul",
    "mul",
    "nearest_upsample2x",
    "no_grad",
    "relative_error",
    "relu",
    "save_weights",
    "sigmoid",
    "split",
    "sub",
]
