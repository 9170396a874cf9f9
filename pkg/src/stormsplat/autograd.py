"""A small reverse-mode differentiation engine over dense numpy tensors.

Only the operations the forecasting model needs are provided. A forward
computation records its graph through ``Tensor`` parents; ``backward`` walks it
once in reverse topological order, accumulates into leaf ``.grad`` and frees it.
"""

from __future__ import annotations

import numpy as np

from . import _accel
from .kernels import scan as SK


class GraphError(RuntimeError):
    """Raised when backward is requested without a live recorded graph."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_recorded")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._recorded = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
        out._recorded = True
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


# ------------------------------------------------------------------ ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = np.empty_like(a.data)
    pos = a.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    s[~pos] = e / (1.0 + e)

    def bw(g):
        _acc(a, g * s * (1.0 - s))

    return _make(s, (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)

    def bw(g):
        _acc(a, g * (1.0 - t * t))

    return _make(t, (a,), bw)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.logaddexp(0.0, x)

    def bw(g):
        _acc(a, g * 0.5 * (1.0 + np.tanh(0.5 * x)))

    return _make(y, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)

    def bw(g):
        _acc(a, g * y)

    return _make(y, (a,), bw)


def rms_norm(a, eps: float = 1e-6) -> Tensor:
    """Divide each row by its root-mean-square."""
    a = as_tensor(a)
    r = np.sqrt(np.mean(a.data * a.data, axis=-1, keepdims=True) + eps)
    y = a.data / r

    def bw(g):
        _acc(a, (g - y * np.mean(g * y, axis=-1, keepdims=True)) / r)

    return _make(y, (a,), bw)


def take_rows(a, index) -> Tensor:
    """Row gather ``a[index]`` for a permutation or any integer index array."""
    a = as_tensor(a)
    index = np.asarray(index, np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        _acc(a, out)

    return _make(a.data[index], (a,), bw)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        out[..., start:stop] = g
        _acc(a, out)

    return _make(a.data[..., start:stop], (a,), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _acc(t, np.take(g, np.arange(lo, hi), axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def total(a) -> Tensor:
    """Sum of every element (a scalar tensor)."""
    a = as_tensor(a)

    def bw(g):
        _acc(a, np.broadcast_to(g, a.shape).astype(np.float64))

    return _make(np.sum(a.data), (a,), bw)


def reverse(a, axis: int = 0) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _acc(a, np.flip(g, axis=axis))

    return _make(np.flip(a.data, axis=axis).copy(), (a,), bw)


def ssm_scan(u, delta, A, B, C, D, use_numba: bool | None = None) -> Tensor:
    """Diagonal selective scan; see ``stormsplat.kernels.scan``."""
    u, delta, A, B, C, D = (as_tensor(t) for t in (u, delta, A, B, C, D))
    nb = _accel.USE_NUMBA if use_numba is None else use_numba
    args = tuple(np.ascontiguousarray(t.data) for t in (u, delta, A, B, C, D))
    fwd, bwd = (SK.scan_forward_nb, SK.scan_backward_nb) if nb else (SK.scan_forward_np, SK.scan_backward_np)
    y, h = fwd(*args)

    def bw(g):
        grads = bwd(*args, h, np.ascontiguousarray(g))
        for t, gt in zip((u, delta, A, B, C, D), grads):
            _acc(t, gt)

    return _make(y, (u, delta, A, B, C, D), bw)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into every leaf ``.grad``; frees the graph."""
    if not isinstance(loss, Tensor) or not loss._recorded:
        raise GraphError("backward needs the output of a recorded forward computation")
    if loss.data.size != 1:
        raise GraphError("backward starts from a scalar")
    order = []
    seen = set()
    stack = [(loss, False)]
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
            if p._recorded and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.grad is not None:
            node._backward(node.grad)
        node.grad = None
        node._parents = ()
        node._backward = None
        node._recorded = False
