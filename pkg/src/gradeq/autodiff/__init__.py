"""Tape-based reverse-mode autodiff with double-backward support."""

from .engine import (
    Graph,
    GraphError,
    NonFiniteError,
    Var,
    add,
    broadcast,
    conv2d,
    exp,
    flip_hw,
    grad,
    log,
    matmul,
    maxpool2,
    mul,
    permute,
    pool_gather,
    reciprocal,
    relu,
    replay,
    reshape,
    rsqrt,
    scale,
    softplus,
    sum_axes,
    unpool2,
)
from .functional import (
    COSINE_NORM_FLOOR,
    affine,
    class_score_rows,
    conv_bias,
    cosine_rows,
    cross_entropy_mean,
    flatten,
    logsumexp_rows,
    mean_all,
    onehot,
    picked_rows,
    row_dot,
    sum_all,
)

__all__ = [
    "Graph", "GraphError", "NonFiniteError", "Var", "grad", "replay",
    "add", "broadcast", "conv2d", "exp", "flip_hw", "log", "matmul",
    "maxpool2", "mul", "permute", "pool_gather", "reciprocal", "relu",
    "reshape", "rsqrt", "scale", "softplus", "sum_axes", "unpool2",
    "COSINE_NORM_FLOOR", "affine", "class_score_rows", "conv_bias",
    "cosine_rows", "cross_entropy_mean", "flatten", "logsumexp_rows",
    "mean_all", "onehot", "picked_rows", "row_dot", "sum_all",
]
