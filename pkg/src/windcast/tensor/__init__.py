"""Minimal dense-tensor library with reverse-mode differentiation."""

from windcast.tensor.core import (
    Tensor,
    as_tensor,
    default_dtype,
    get_default_dtype,
    grad_enabled,
    no_grad,
    set_default_dtype,
)
from windcast.tensor.gradcheck import grad_check, relative_error
from windcast.tensor.kernels import conv3d_naive
from windcast.tensor.ops import (
    add,
    batchnorm,
    constant,
    conv3d,
    mul,
    pad_crop_spatial,
    relu,
    sigmoid,
    spatial_mean,
    sub,
    sum,
    upsample2x_spatial,
)

__all__ = [
    "Tensor", "as_tensor", "default_dtype", "get_default_dtype", "grad_enabled", "no_grad",
    "set_default_dtype", "grad_check", "relative_error", "conv3d_naive", "add", "batchnorm",
    "constant", "conv3d", "mul", "pad_crop_spatial", "relu", "sigmoid", "spatial_mean", "sub",
    "sum", "upsample2x_spatial",
]
