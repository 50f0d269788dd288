"""Differentiable operators needed by the forecasting network."""

import numpy as np

from windcast.errors import ConfigError, ShapeError
from windcast.tensor import kernels
from windcast.tensor.core import Tensor, as_tensor, broadcast_shape, make_node, unbroadcast


def _pair(x, y):
    # python scalars adopt the dtype of the tensor operand
    if isinstance(x, Tensor) and not isinstance(y, Tensor):
        return x, as_tensor(y, dtype=x.dtype)
    if isinstance(y, Tensor) and not isinstance(x, Tensor):
        return as_tensor(x, dtype=y.dtype), y
    return as_tensor(x), as_tensor(y)


def add(x, y):
    x, y = _pair(x, y)
    broadcast_shape(x.shape, y.shape)
    xs, ys = x.shape, y.shape

    def backward(g):
        return unbroadcast(g, xs), unbroadcast(g, ys)

    return make_node(x.data + y.data, (x, y), backward, "add")


def sub(x, y):
    x, y = _pair(x, y)
    broadcast_shape(x.shape, y.shape)
    xs, ys = x.shape, y.shape

    def backward(g):
        return unbroadcast(g, xs), unbroadcast(-g, ys)

    return make_node(x.data - y.data, (x, y), backward, "sub")


def mul(x, y):
    x, y = _pair(x, y)
    broadcast_shape(x.shape, y.shape)
    xd, yd = x.data, y.data

    def backward(g):
        return unbroadcast(g * yd, xd.shape), unbroadcast(g * xd, yd.shape)

    return make_node(xd * yd, (x, y), backward, "mul")


def sum(x):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    # two-branch form avoids overflow in exp
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)

    def backward(g):
        return (g * s * (1 - s),)

    return make_node(s, (x,), backward, "sigmoid")


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return make_node(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,), backward, "relu")


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """3-D cross-correlation over ``(b, c, t, h, w)`` input."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    kernels.check_conv_shapes(x.shape, weight.shape, None if bias is None else bias.shape)
    out, cols = kernels.conv3d_forward(x.data, weight.data, None if bias is None else bias.data,
                                       stride, padding)
    x_shape, wd = x.shape, weight.data

    def backward(g):
        dx, dw, db = kernels.conv3d_backward(g, x_shape, wd, cols, stride, padding)
        return (dx, dw) if bias is None else (dx, dw, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv3d")


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalisation over ``(b, t, h, w)``.

    In training mode the batch statistics are used and the running arrays are
    updated in place (the running variance uses the unbiased estimate).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 5:
        raise ShapeError(f"batchnorm expects (b,c,t,h,w), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm parameters {gamma.shape}/{beta.shape} vs {c} channels")
    axes = (0, 2, 3, 4)
    n = x.data.size // c
    if n == 0:
        raise ConfigError("batchnorm over an empty reduction set")
    bshape = (1, c, 1, 1, 1)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape).astype(x.dtype)) * inv.reshape(bshape)
    gd = gamma.data
    out = xhat * gd.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd.reshape(bshape)
        if training:
            dx = (inv.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), backward, "batchnorm")


def spatial_mean(x):
    """Mean over the two trailing (lat, lon) axes, kept as size 1."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError(f"spatial_mean expects (b,c,t,h,w), got {x.shape}")
    shape = x.shape
    area = shape[3] * shape[4]

    def backward(g):
        return (np.broadcast_to(g / area, shape).copy(),)

    return make_node(x.data.mean(axis=(3, 4), keepdims=True), (x,), backward, "spatial_mean")


def upsample2x_spatial(x):
    """Nearest-neighbour 2x replication of each (lat, lon) cell."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError(f"upsample2x_spatial expects (b,c,t,h,w), got {x.shape}")
    b, c, t, h, w = x.shape

    def backward(g):
        return (g.reshape(b, c, t, h, 2, w, 2).sum(axis=(4, 6)),)

    out = np.repeat(np.repeat(x.data, 2, axis=3), 2, axis=4)
    return make_node(out, (x,), backward, "upsample2x")


def _fit_axis(n, target):
    """Slices (src, dst) mapping a length-n axis into a centred length-target axis."""
    if target >= n:
        lo = (target - n) // 2
        return slice(0, n), slice(lo, lo + n)
    lo = (n - target) // 2
    return slice(lo, lo + target), slice(0, target)


def pad_crop_spatial(x, target_h, target_w):
    """Zero-pad or centre-crop the spatial axes to ``(target_h, target_w)``."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError(f"pad_crop_spatial expects (b,c,t,h,w), got {x.shape}")
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"invalid target size {(target_h, target_w)}")
    b, c, t, h, w = x.shape
    if (h, w) == (target_h, target_w):
        return x
    sh, dh = _fit_axis(h, target_h)
    sw, dw = _fit_axis(w, target_w)
    out = np.zeros((b, c, t, target_h, target_w), dtype=x.dtype)
    out[..., dh, dw] = x.data[..., sh, sw]

    def backward(g):
        gx = np.zeros((b, c, t, h, w), dtype=g.dtype)
        gx[..., sh, sw] = g[..., dh, dw]
        return (gx,)

    return make_node(out, (x,), backward, "pad_crop")


def constant(data, dtype=None):
    """A tensor that never requires gradients."""
    return Tensor(data, requires_grad=False, dtype=dtype)
