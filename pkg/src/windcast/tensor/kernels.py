"""Convolution kernels: im2col fast path, naive-loop reference, backend switch.

The compiled extension ``windcast.tensor._conv`` is used when it imports;
otherwise the numpy implementation in ``_conv_py`` takes over. Set
``WINDCAST_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os

import numpy as np

from windcast.errors import ShapeError
from windcast.tensor import _conv_py

logger = logging.getLogger(__name__)

_BACKENDS = {"python": _conv_py}
try:
    if os.environ.get("WINDCAST_PURE_PYTHON"):
        raise ImportError("pure-python backend forced by environment")
    from windcast.tensor import _conv as _conv_ext
except ImportError as exc:  # pragma: no cover - depends on the build
    logger.debug("compiled conv kernels unavailable: %s", exc)
    BACKEND = "python"
else:
    _BACKENDS["compiled"] = _conv_ext
    BACKEND = "compiled"


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    """Select the im2col backend (``"compiled"`` or ``"python"``)."""
    global BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"unknown conv backend {name!r}; have {available_backends()}")
    BACKEND = name


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(e) for e in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 values, got {v}")
    return v


def conv_output_shape(in_shape, kernel, stride, padding):
    """``floor((n + 2p - k) / s) + 1`` per axis."""
    out = tuple((n + 2 * p - k) // s + 1
                for n, k, s, p in zip(in_shape, kernel, stride, padding))
    if min(out) < 1:
        raise ShapeError(f"conv output would be empty: input {in_shape}, kernel {kernel}, "
                         f"stride {stride}, padding {padding}")
    return out


def check_conv_shapes(x_shape, w_shape, b_shape=None):
    if len(x_shape) != 5 or len(w_shape) != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got x{tuple(x_shape)} "
                         f"and w{tuple(w_shape)}")
    if x_shape[1] != w_shape[1]:
        raise ShapeError(f"conv3d channel mismatch: x{tuple(x_shape)} vs w{tuple(w_shape)}")
    if b_shape is not None and tuple(b_shape) != (w_shape[0],):
        raise ShapeError(f"conv3d bias shape {tuple(b_shape)} does not match w{tuple(w_shape)}")


def _pad(x, padding):
    pt, ph, pw = padding
    if not (pt or ph or pw):
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def im2col(x, kernel, stride, padding, backend=None):
    """Return ``(cols, out_dims)`` with cols shaped ``(b, c*kt*kh*kw, to*ho*wo)``."""
    kernel, stride, padding = _triple(kernel), _triple(stride), _triple(padding)
    out = conv_output_shape(x.shape[2:], kernel, stride, padding)
    xp = _pad(x, padding)
    nb, nc = x.shape[:2]
    cols = np.empty((nb, nc * int(np.prod(kernel)), int(np.prod(out))), dtype=x.dtype)
    impl = _BACKENDS[backend or BACKEND]
    impl.im2col3d(xp, cols, *kernel, *stride, *out)
    return cols, out


def col2im(cols, x_shape, kernel, stride, padding, backend=None):
    """Adjoint of :func:`im2col`: scatter-add columns back onto an input-shaped array."""
    kernel, stride, padding = _triple(kernel), _triple(stride), _triple(padding)
    out = conv_output_shape(x_shape[2:], kernel, stride, padding)
    pt, ph, pw = padding
    nb, nc, t, h, w = x_shape
    dxp = np.zeros((nb, nc, t + 2 * pt, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    impl = _BACKENDS[backend or BACKEND]
    impl.col2im3d(np.ascontiguousarray(cols), dxp, *kernel, *stride, *out)
    return dxp[:, :, pt:pt + t, ph:ph + h, pw:pw + w]


def conv3d_forward(x, w, b, stride=1, padding=0, backend=None):
    """Cross-correlation plus bias via im2col + matmul.

    Returns ``(out, cols)``; the columns are kept for the backward pass.
    """
    check_conv_shapes(x.shape, w.shape, None if b is None else b.shape)
    cols, out_dims = im2col(x, w.shape[2:], stride, padding, backend)
    wm = w.reshape(w.shape[0], -1)
    out = np.matmul(wm, cols)
    if b is not None:
        out += b[None, :, None]
    return out.reshape((x.shape[0], w.shape[0]) + tuple(out_dims)), cols


def conv3d_backward(dout, x_shape, w, cols, stride=1, padding=0, backend=None):
    """Gradients ``(dx, dw, db)`` of :func:`conv3d_forward`."""
    nb, no = dout.shape[:2]
    dmat = dout.reshape(nb, no, -1)
    dw = np.matmul(dmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dmat.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(no, -1).T, dmat)
    dx = col2im(dcols, x_shape, w.shape[2:], stride, padding, backend)
    return dx, dw, db


def conv3d_naive(x, w, b=None, stride=1, padding=0):
    """Direct seven-loop cross-correlation. Slow; reference only."""
    check_conv_shapes(x.shape, w.shape, None if b is None else b.shape)
    st, sh, sw = _triple(stride)
    padding = _triple(padding)
    kt, kh, kw = w.shape[2:]
    to, ho, wo = conv_output_shape(x.shape[2:], (kt, kh, kw), (st, sh, sw), padding)
    xp = _pad(x, padding)
    nb, nc = x.shape[:2]
    no = w.shape[0]
    out = np.zeros((nb, no, to, ho, wo), dtype=x.dtype)
    for n in range(nb):
        for o in range(no):
            for t in range(to):
                for h in range(ho):
                    for q in range(wo):
                        acc = 0.0 if b is None else float(b[o])
                        for c in range(nc):
                            for a in range(kt):
                                for i in range(kh):
                                    for j in range(kw):
                                        acc += (float(xp[n, c, t * st + a, h * sh + i, q * sw + j])
                                                * float(w[o, c, a, i, j]))
                        out[n, o, t, h, q] = acc
    return out
