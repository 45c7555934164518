"""A small reverse-mode autodiff over numpy arrays.

Only the operations the scorer needs are provided.  Every op records its
parents and a closure that pushes the output gradient back; ``backward``
walks the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def _accum(self, g):
        if self.requires_grad:
            self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise ------------------------------------------------------
    def __add__(self, other):
        o = as_tensor(other)

        def bw(g):
            self._accum(_unbroadcast(g, self.shape))
            o._accum(_unbroadcast(g, o.shape))

        return Tensor(self.data + o.data, _parents=(self, o), _backward=bw)

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _backward=lambda g: self._accum(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        o = as_tensor(other)

        def bw(g):
            self._accum(_unbroadcast(g * o.data, self.shape))
            o._accum(_unbroadcast(g * self.data, o.shape))

        return Tensor(self.data * o.data, _parents=(self, o), _backward=bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        o = as_tensor(other)
        a, b = self.data, o.data

        def bw(g):
            if a.ndim == 1 or b.ndim == 1:
                raise NotImplementedError("matmul backward needs >= 2-d operands")
            self._accum(_unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape))
            o._accum(_unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape))

        return Tensor(a @ b, _parents=(self, o), _backward=bw)

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: self._accum(g * out))

    def log(self):
        return Tensor(np.log(self.data), _parents=(self,), _backward=lambda g: self._accum(g / self.data))

    def silu(self):
        sig = stable_sigmoid(self.data)
        out = self.data * sig
        return Tensor(out, _parents=(self,),
                      _backward=lambda g: self._accum(g * (sig * (1.0 + self.data * (1.0 - sig)))))

    def sigmoid(self):
        out = stable_sigmoid(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: self._accum(g * out * (1.0 - out)))

    def abs(self):
        return Tensor(np.abs(self.data), _parents=(self,), _backward=lambda g: self._accum(g * np.sign(self.data)))

    # -- shape ------------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape))

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), _backward=bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) / float(n)

    def reshape(self, *shape):
        return Tensor(self.data.reshape(*shape), _parents=(self,),
                      _backward=lambda g: self._accum(g.reshape(self.shape)))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return Tensor(self.data.transpose(*axes), _parents=(self,),
                      _backward=lambda g: self._accum(g.transpose(*inv)))

    def __getitem__(self, idx):
        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accum(full)

        return Tensor(self.data[idx], _parents=(self,), _backward=bw)

    # -- normalizers ------------------------------------------------------
    def log_softmax(self, axis=-1, mask=None):
        """``mask`` (broadcastable, True = keep) removes entries from the normalizer;
        masked outputs are -inf-free large negatives and receive no gradient."""
        x = self.data
        if mask is not None:
            x = np.where(mask, x, -np.inf)
        m = np.max(x, axis=axis, keepdims=True)
        z = x - m
        lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
        out = z - lse
        sm = np.exp(out)
        if mask is not None:
            out = np.where(mask, out, -1e30)
            sm = np.where(mask, sm, 0.0)

        def bw(g):
            if mask is not None:
                g = np.where(mask, g, 0.0)
            self._accum(g - sm * g.sum(axis=axis, keepdims=True))

        return Tensor(out, _parents=(self,), _backward=bw)

    def softmax(self, axis=-1, mask=None):
        x = self.data
        if mask is not None:
            x = np.where(mask, x, -np.inf)
        e = np.exp(x - np.max(x, axis=axis, keepdims=True))
        out = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            self._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))

        return Tensor(out, _parents=(self,), _backward=bw)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(ts, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, cuts, axis=axis)):
            t._accum(part)

    return Tensor(np.concatenate([t.data for t in ts], axis=axis), _parents=tuple(ts), _backward=bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits, stable for large |x|."""
    y = np.asarray(targets, dtype=np.float64)
    x = logits.data
    out = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    sig = stable_sigmoid(x)
    return Tensor(out, _parents=(logits,), _backward=lambda g: logits._accum(g * (sig - y)))


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5, idx=None) -> np.ndarray:
    """Central differences of scalar ``f`` wrt ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = range(x.size) if idx is None else idx
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in it:
        old = flat[k]
        flat[k] = old + eps
        fp = f()
        flat[k] = old - eps
        fm = f()
        flat[k] = old
        gflat[k] = (fp - fm) / (2 * eps)
    return g
