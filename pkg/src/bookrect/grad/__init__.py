"""Minimal reverse-mode autodiff: tensors, tape, operators, checking."""

from .check import GradCheckReport, grad_check
from .ops import (
    AttentionParams,
    conv2d,
    instance_norm,
    layer_norm,
    linear,
    multi_head_attention,
    relu,
    softmax,
)
from .tensor import (
    ConfigError,
    GradTape,
    NonFiniteGradError,
    ShapeError,
    Tensor,
    active_tape,
    add,
    bias_add,
    concat,
    matmul,
    mul,
    neg,
    parameter,
    record_op,
    reshape,
    split,
    sub,
    tabs,
    tensor,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "ConfigError",
    "NonFiniteGradError",
    "tensor",
    "parameter",
    "active_tape",
    "record_op",
    "add",
    "sub",
    "mul",
    "neg",
    "bias_add",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "split",
    "tsum",
    "tmean",
    "tabs",
    "relu",
    "softmax",
    "layer_norm",
    "instance_norm",
    "linear",
    "conv2d",
    "AttentionParams",
    "multi_head_attention",
    "grad_check",
    "GradCheckReport",
]
