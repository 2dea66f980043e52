"""Tiny numpy autodiff used by the detector's learnable pieces."""

from .autograd import (
    Tensor,
    add,
    as_tensor,
    bce_with_logits,
    bilinear_upsample,
    conv2d,
    matmul,
    mul,
    relu,
    repeat_rows,
    reshape,
    roi_align,
    scale,
    sigmoid,
    smooth_l1,
    softmax,
    softmax_cross_entropy,
    tensor_sum,
)

__all__ = [
    "Tensor", "add", "as_tensor", "bce_with_logits", "bilinear_upsample",
    "conv2d", "matmul", "mul", "relu", "repeat_rows", "reshape", "roi_align",
    "scale", "sigmoid", "smooth_l1", "softmax", "softmax_cross_entropy",
    "tensor_sum",
]
