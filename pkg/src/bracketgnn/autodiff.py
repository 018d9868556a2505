"""A small reverse-mode autodiff tape over numpy arrays.

Each :class:`Tensor` remembers its parents and a vector-Jacobian product.
Operations are coarse (a whole dense layer, a whole bracket vector field) so
the tape stays short and the Python overhead stays negligible next to the
array work.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "linear",
    "tanh",
    "concat0",
    "slice0",
    "lincomb",
    "custom",
    "batch_sse",
]


class Tensor:
    __slots__ = ("data", "grad", "parents", "vjp", "name")

    def __init__(self, data, parents=(), vjp=None, name=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return np.shape(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed=1.0):
    """Accumulate ``d root / d leaf`` into ``leaf.grad`` for every reachable leaf.

    Interior gradients are released as soon as they have been propagated.
    """
    order = _toposort(root)
    root.grad = np.broadcast_to(np.asarray(seed, dtype=np.float64), np.shape(root.data)).copy()
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
        node.grad = None


def linear(x, W, b=None):
    """``x @ W + b`` over the last axis of ``x``."""
    x, W = _as_tensor(x), _as_tensor(W)
    out = x.data @ W.data
    parents = (x, W)
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data
        parents = (x, W, b)

    def vjp(g):
        xf = x.data.reshape(-1, x.data.shape[-1])
        gf = g.reshape(-1, g.shape[-1])
        gx = g @ W.data.T
        gW = xf.T @ gf
        if b is None:
            return gx, gW
        return gx, gW, gf.sum(axis=0)

    return Tensor(out, parents, vjp)


def tanh(x):
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return Tensor(y, (x,), lambda g: (g * (1.0 - y * y),))


def concat0(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    n = a.data.shape[0]
    return Tensor(np.concatenate([a.data, b.data]), (a, b), lambda g: (g[:n], g[n:]))


def slice0(x, start, stop):
    x = _as_tensor(x)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return Tensor(x.data[start:stop], (x,), vjp)


def lincomb(terms):
    """Linear combination ``sum(c * x for c, x in terms)`` with scalar ``c``."""
    coeffs = [float(c) for c, _ in terms]
    xs = [_as_tensor(x) for _, x in terms]
    out = coeffs[0] * xs[0].data
    for c, x in zip(coeffs[1:], xs[1:]):
        out = out + c * x.data
    return Tensor(out, tuple(xs), lambda g: tuple(c * g for c in coeffs))


def custom(value, parents, vjp, name=None):
    """Record an op whose forward value and pullback are computed elsewhere."""
    return Tensor(value, tuple(_as_tensor(p) for p in parents), vjp, name)


def batch_sse(pred, target):
    """Mean over the batch axis of the per-sample sum of squared errors.

    ``pred`` and ``target`` are shaped ``(V, B, C)``.
    """
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ValueError(f"prediction shape {pred.data.shape} != target shape {target.shape}")
    r = pred.data - target
    B = r.shape[1]
    val = np.asarray(np.sum(r * r) / B)
    return Tensor(val, (pred,), lambda g: (g * (2.0 / B) * r,))
