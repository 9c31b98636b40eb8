"""A small reverse-mode autodiff engine over numpy arrays."""
from contextlib import contextmanager

import numpy as np

_DTYPE = np.float32


def get_dtype():
    return _DTYPE


def set_precision(bits):
    """Switch the global float width (32 for experiments, 64 for gradient checks)."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"unsupported precision {bits!r}")


@contextmanager
def precision(bits):
    old = 32 if _DTYPE is np.float32 else 64
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(old)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """Dense array plus the bookkeeping needed for reverse-mode differentiation.

    Leaves created with ``requires_grad=True`` and a ``name`` are reported by
    :meth:`backward`. Interior nodes keep references to their parents until
    the graph is consumed.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # graph construction

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make_pair(a.data + b.data, a, b, bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make_pair(a.data - b.data, a, b, bw)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make_pair(a.data * b.data, a, b, bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._make_pair(a.data / b.data, a, b, bw)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return self._unary(-self.data, lambda g: -g)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return self._unary(x ** exponent, lambda g: g * exponent * x ** (exponent - 1))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            A, B = a.data, b.data
            if B.ndim == 1:
                return (np.outer(g, B) if A.ndim == 2 else g * B), A.T @ g
            if A.ndim == 1:
                return B @ g, np.outer(A, g)
            return g @ B.T, A.T @ g

        return Tensor._make_pair(a.data @ b.data, a, b, bw)

    @staticmethod
    def _make_pair(data, a, b, bw):
        if not (a.requires_grad or b.requires_grad):
            return Tensor(data)

        def backward(g):
            ga, gb = bw(g)
            return (ga if a.requires_grad else None), (gb if b.requires_grad else None)

        return Tensor(data, requires_grad=True, _parents=(a, b), _backward=backward)

    def _unary(self, data, bw):
        if not self.requires_grad:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=(self,), _backward=lambda g: (bw(g),))

    # elementwise

    def exp(self):
        out = np.exp(self.data)
        return self._unary(out, lambda g: g * out)

    def log(self):
        x = self.data
        return self._unary(np.log(x), lambda g: g / x)

    def sqrt(self):
        out = np.sqrt(self.data)
        return self._unary(out, lambda g: g * 0.5 / out)

    def tanh(self):
        out = np.tanh(self.data)
        return self._unary(out, lambda g: g * (1.0 - out * out))

    def relu(self):
        mask = self.data > 0
        return self._unary(self.data * mask, lambda g: g * mask)

    def cos(self):
        x = self.data
        return self._unary(np.cos(x), lambda g: -g * np.sin(x))

    def arccos(self):
        x = self.data
        return self._unary(np.arccos(x), lambda g: -g / np.sqrt(1.0 - x * x))

    def clip(self, lo, hi):
        x = self.data
        mask = (x >= lo) & (x <= hi)
        return self._unary(np.clip(x, lo, hi), lambda g: g * mask)

    def minimum(self, bound):
        """Elementwise ``min(self, bound)`` for a scalar bound."""
        x = self.data
        mask = x <= bound
        return self._unary(np.minimum(x, bound), lambda g: g * mask)

    # reductions and shape

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return self._unary(np.sum(self.data, axis=axis, keepdims=keepdims), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return self._unary(self.data.reshape(*shape), lambda g: g.reshape(old))

    @property
    def T(self):
        return self._unary(self.data.T, lambda g: g.T)

    # differentiation

    def backward(self):
        """Propagate d(self)/d(leaf) through the recorded graph.

        Returns a map from leaf name to gradient array, covering every named
        leaf with ``requires_grad`` that the loss depends on. The graph is
        released afterwards, so a second call raises.
        """
        if self._consumed:
            raise RuntimeError("backward called twice on the same graph")
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not np.isfinite(self.data).all():
            raise FloatingPointError("non-finite loss")
        self._consumed = True
        if not self.requires_grad:
            return {}

        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
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
        result = {}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.name is not None:
                    if node.name in result:
                        result[node.name] = result[node.name] + g
                    else:
                        result[node.name] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None
            node._consumed = True
        return result


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not any(t.requires_grad for t in tensors):
        return Tensor(data)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return Tensor(data, requires_grad=True, _parents=tuple(tensors), _backward=backward)
