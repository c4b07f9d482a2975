"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the score network needs are provided.  Everything runs
in float64 so that finite-difference checks are meaningful.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad", "name")

    def __init__(self, data, parents=(), backward=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.broadcast_to(grad, self.data.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def param(value, name=None):
    return Tensor(value, requires_grad=True, name=name)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def neg(a):
    out = Tensor(-a.data, (a,))
    out._backward = lambda g: a._accumulate(-g)
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = backward
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b._accumulate(gb)

    out._backward = backward
    return out


def exp(a):
    val = np.exp(a.data)
    out = Tensor(val, (a,))
    out._backward = lambda g: a._accumulate(g * val)
    return out


def log(a):
    out = Tensor(np.log(a.data), (a,))
    out._backward = lambda g: a._accumulate(g / a.data)
    return out


def sqrt(a):
    val = np.sqrt(a.data)
    out = Tensor(val, (a,))
    out._backward = lambda g: a._accumulate(g * 0.5 / val)
    return out


def reciprocal(a):
    val = 1.0 / a.data
    out = Tensor(val, (a,))
    out._backward = lambda g: a._accumulate(-g * val * val)
    return out


def absolute(a):
    out = Tensor(np.abs(a.data), (a,))
    out._backward = lambda g: a._accumulate(g * np.sign(a.data))
    return out


def silu(a):
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig, (a,))
    out._backward = lambda g: a._accumulate(g * sig * (1.0 + a.data * (1.0 - sig)))
    return out


def gelu(a):
    # tanh approximation
    c = np.sqrt(2.0 / np.pi)
    x = a.data
    inner = c * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + th), (a,))

    def backward(g):
        d_inner = c * (1.0 + 3 * 0.044715 * x**2)
        a._accumulate(g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * d_inner))

    out._backward = backward
    return out


def tsum(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    out._backward = backward
    return out


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), (a,))
    out._backward = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def transpose(a, axes):
    inv = np.argsort(axes)
    out = Tensor(np.transpose(a.data, axes), (a,))
    out._backward = lambda g: a._accumulate(np.transpose(g, inv))
    return out


def getitem(a, idx):
    out = Tensor(a.data[idx], (a,))

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accumulate(full)

    out._backward = backward
    return out


def take(table, idx):
    """Row gather ``table[idx]`` for an integer index array."""
    idx = np.asarray(idx)
    out = Tensor(table.data[idx], (table,))

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accumulate(full)

    out._backward = backward
    return out


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    out._backward = backward
    return out


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, (a,))
    out._backward = lambda g: a._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))
    return out


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    val = z - lse
    p = np.exp(val)
    out = Tensor(val, (a,))
    out._backward = lambda g: a._accumulate(g - p * g.sum(axis=axis, keepdims=True))
    return out


def layer_norm(a, eps=1e-6):
    """Normalize over the last axis, no affine parameters."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y, (a,))

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - y * gy))

    out._backward = backward
    return out


def rope(a, cos, sin):
    """Rotate channel pairs (first half, second half) of the last axis.

    ``cos``/``sin`` broadcast against ``a[..., :half]``.
    """
    half = a.shape[-1] // 2
    x1, x2 = a.data[..., :half], a.data[..., half:]
    out = Tensor(np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1), (a,))

    def backward(g):
        g1, g2 = g[..., :half], g[..., half:]
        a._accumulate(np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1))

    out._backward = backward
    return out
