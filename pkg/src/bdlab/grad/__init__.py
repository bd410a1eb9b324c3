"""Small numpy autodiff engine: tensors, CNN layer primitives, graphs, Adam."""

from .check import GradCheckReport, grad_check
from .graph import Graph, GraphError, backward, forward
from .optim import Adam, AdamState, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    add,
    blend,
    conv2d,
    cross_entropy,
    dense,
    flatten,
    index,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    mean,
    mul,
    pad2d,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    splice,
    tsum,
)

__all__ = [
    "Adam", "AdamState", "Graph", "GraphError", "GradCheckReport", "ShapeError", "Tensor",
    "adam_step", "add", "backward", "blend", "conv2d", "cross_entropy", "dense", "flatten",
    "forward", "grad_check", "index", "log", "log_softmax", "matmul", "max_pool2d", "mean",
    "mul", "pad2d", "relu", "reshape", "sigmoid", "softmax", "softmax_cross_entropy", "splice", "tsum",
]
