"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a backward closure and their parents; :meth:`Tensor.backward`
walks the recorded graph in reverse topological order. Each graph can be
walked once: the closures are released afterwards.
"""

import contextlib

import numpy as np

from windcast.errors import GraphError, NumericError, ShapeError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype):
    """Set the float type new tensors use (float32 for training, float64 for checks)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate ``.grad`` on every leaf that requires gradients."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise GraphError("graph already consumed by an earlier backward(); re-run the forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires gradients")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    node._accumulate(g)
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._released = True

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from windcast.tensor import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from windcast.tensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from windcast.tensor import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from windcast.tensor import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from windcast.tensor import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from windcast.tensor import ops
        return ops.sum(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))
    return Tensor(x, dtype=dtype)


def make_node(data, parents, backward, op):
    """Wrap an op result; record the graph only when some parent needs gradients."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after size-1 stretching."""
    if grad.shape == tuple(shape):
        return grad
    nd = grad.ndim - len(shape)
    if nd:
        grad = grad.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from None
