"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the QUEST head needs are provided. Every op records its
parents and a closure that accumulates gradients into them; ``backward``
walks the graph in reverse topological order.
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self._op = _op

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    T = property(lambda self: self.transpose())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        # iterative post-order DFS (a recursive closure would form a reference
        # cycle that keeps the whole graph alive until the next gc pass)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            stack.append((t, True))
            stack.extend((p, False) for p in reversed(t._parents))
        self._accum(np.ones_like(self.data) if grad is None else grad)
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other, self)
        out = Tensor(self.data + other.data, _parents=(self, other), _op="add")

        def back(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_wrap(other, self))

    def __rsub__(self, other):
        return _wrap(other, self) + (-self)

    def __mul__(self, other):
        other = _wrap(other, self)
        out = Tensor(self.data * other.data, _parents=(self, other), _op="mul")

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.shape))

        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self)
        out = Tensor(self.data / other.data, _parents=(self, other), _op="div")

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / other.data**2, other.shape))

        out._backward = back
        return out

    def __pow__(self, k):
        out = Tensor(self.data**k, _parents=(self,), _op="pow")
        out._backward = lambda g: self._accum(g * k * self.data ** (k - 1))
        return out

    def __matmul__(self, other):
        other = _wrap(other, self)
        out = Tensor(self.data @ other.data, _parents=(self, other), _op="matmul")

        def back(g):
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ g)

        out._backward = back
        return out

    def __rmatmul__(self, other):
        return _wrap(other, self) @ self

    # -- shape ------------------------------------------------------------

    def transpose(self):
        out = Tensor(self.data.T, _parents=(self,), _op="T")
        out._backward = lambda g: self._accum(g.T)
        return out

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _parents=(self,), _op="reshape")
        out._backward = lambda g: self._accum(g.reshape(self.shape))
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], _parents=(self,), _op="index")

        basic = isinstance(idx, slice) or (
            isinstance(idx, tuple) and all(isinstance(i, (slice, int)) for i in idx)
        )

        def back(g):
            full = np.zeros_like(self.data)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            self._accum(full)

        out._backward = back
        return out

    def astype(self, dtype):
        out = Tensor(self.data.astype(dtype), _parents=(self,), _op="astype")
        out._backward = lambda g: self._accum(g.astype(self.data.dtype))
        return out

    # -- reductions and nonlinearities ------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), _op="sum")

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape))

        out._backward = back
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def relu(self):
        mask = self.data > 0
        out = Tensor(self.data * mask, _parents=(self,), _op="relu")
        out._backward = lambda g: self._accum(g * mask)
        return out

    def exp(self):
        e = np.exp(self.data)
        out = Tensor(e, _parents=(self,), _op="exp")
        out._backward = lambda g: self._accum(g * e)
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,), _op="log")
        out._backward = lambda g: self._accum(g / self.data)
        return out

    def sqrt(self):
        r = np.sqrt(self.data)
        out = Tensor(r, _parents=(self,), _op="sqrt")
        out._backward = lambda g: self._accum(g * 0.5 / r)
        return out


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64 if like is None else like.data.dtype))


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors), _op="concat")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            t._accum(np.take(g, np.arange(lo, hi), axis=axis))

    out._backward = back
    return out


def window_max(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping max over row windows of size ``kernel`` (last window may be short)."""
    m, c = x.shape
    n_win = -(-m // kernel)
    pad = n_win * kernel - m
    data = x.data
    if pad:
        data = np.concatenate([data, np.full((pad, c), -np.inf, dtype=data.dtype)])
    win = data.reshape(n_win, kernel, c)
    arg = win.argmax(axis=1)
    out = Tensor(np.take_along_axis(win, arg[:, None, :], axis=1)[:, 0, :], _parents=(x,), _op="window_max")
    rows = arg + (np.arange(n_win) * kernel)[:, None]
    cols = np.broadcast_to(np.arange(c), rows.shape)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, cols), g)
        x._accum(full)

    out._backward = back
    return out


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float):
    """Training-mode batch norm over rows; returns ``(out, mean, biased_var)``.

    Fused so the backward pass needs only the normalized input and the
    inverse standard deviation instead of the whole chain of temporaries.
    """
    data = x.data
    mu = data.mean(axis=0)
    xhat = data - mu
    var = np.einsum("ij,ij->j", xhat, xhat) / data.shape[0]
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = Tensor(xhat * scale.data + shift.data, _parents=(x, scale, shift), _op="batch_norm")

    def back(g):
        gsum = g.sum(axis=0)
        gx = np.einsum("ij,ij->j", g, xhat)
        if scale.requires_grad:
            scale._accum(gx.reshape(scale.shape))
        if shift.requires_grad:
            shift._accum(gsum.reshape(shift.shape))
        if x.requires_grad:
            n = data.shape[0]
            x._accum((scale.data.ravel() * inv) * (g - gsum / n - xhat * (gx / n)))

    out._backward = back
    return out, mu, var


def softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, _parents=(x,), _op="softmax")
    out._backward = lambda g: x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))
    return out


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    out = Tensor(y, _parents=(x,), _op="log_softmax")
    out._backward = lambda g: x._accum(g - p * g.sum(axis=axis, keepdims=True))
    return out
