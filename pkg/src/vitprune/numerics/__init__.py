"""Deterministic dense kernels and a small reverse-mode autodiff tape."""

from . import autodiff as ops
from .autodiff import GradTape, Tensor, backward
from .kernels import (
    check_finite,
    cross_entropy_loss,
    gelu,
    layer_norm,
    matmul,
    matmul_into,
    softmax_rows,
)

__all__ = [
    "GradTape",
    "Tensor",
    "backward",
    "check_finite",
    "cross_entropy_loss",
    "gelu",
    "layer_norm",
    "matmul",
    "matmul_into",
    "ops",
    "softmax_rows",
]
