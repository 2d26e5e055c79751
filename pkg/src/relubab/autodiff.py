"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the bound-propagation code needs are provided. Helper
functions (``where``, ``maximum``, ``minimum``, ``sum``) accept plain arrays
too and then fall through to numpy, so one code path serves both the
gradient-free and the differentiated computation with identical values.

Selections (``where`` masks, clamp branches) are constants of the forward
pass: the gradient flows through the chosen branch only.
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    __array_ufunc__ = None  # make numpy defer to our reflected operators
    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Var):
            sa, sb = self.shape, other.shape
            return Var(self.value + other.value, (self, other),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
        sa = self.shape
        return Var(self.value + other, (self,), lambda g: (_unbroadcast(g, sa),))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        if isinstance(other, Var):
            sa, sb = self.shape, other.shape
            return Var(self.value - other.value, (self, other),
                       lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))
        sa = self.shape
        return Var(self.value - other, (self,), lambda g: (_unbroadcast(g, sa),))

    def __rsub__(self, other):
        sa = self.shape
        return Var(other - self.value, (self,), lambda g: (-_unbroadcast(g, sa),))

    def __mul__(self, other):
        if isinstance(other, Var):
            a, b = self.value, other.value
            return Var(a * b, (self, other),
                       lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))
        other = np.asarray(other)
        sa = self.shape
        return Var(self.value * other, (self,), lambda g: (_unbroadcast(g * other, sa),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            a, b = self.value, other.value
            out = a / b
            return Var(out, (self, other),
                       lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)))
        other = np.asarray(other)
        sa = self.shape
        return Var(self.value / other, (self,), lambda g: (_unbroadcast(g / other, sa),))

    def __rtruediv__(self, other):
        b = self.value
        out = other / b
        return Var(out, (self,), lambda g: (_unbroadcast(-g * out / b, b.shape),))

    def __matmul__(self, other):
        # right operand is a constant matrix or vector
        if isinstance(other, Var):
            raise TypeError("Var @ Var is not supported")
        m = np.asarray(other)
        if m.ndim == 1:
            return Var(self.value @ m, (self,), lambda g: (g[..., None] * m,))
        return Var(self.value @ m, (self,), lambda g: (g @ m.T,))

    def reshape(self, *shape):
        orig = self.shape
        return Var(self.value.reshape(*shape), (self,), lambda g: (g.reshape(orig),))

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Var(self.value[idx], (self,), back)

    def sum(self, axis=None):
        shape = self.shape

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Var(self.value.sum(axis=axis), (self,), back)

    # -- reverse pass ----------------------------------------------------
    def backward(self, seed=None):
        """Accumulate d(sum(seed * self))/d(leaf) into every leaf's ``grad``."""
        order: list[Var] = []
        seen: set[int] = set()
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
        grads = {id(self): np.ones(self.shape) if seed is None else np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg


def value(x):
    return x.value if isinstance(x, Var) else x


def where(mask, a, b):
    """``np.where`` with gradient routed to the selected branch."""
    mask = np.asarray(mask)
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.where(mask, a, b)
    av, bv = value(a), value(b)
    out = np.where(mask, av, bv)
    parents, backs = [], []
    if isinstance(a, Var):
        parents.append(a)
        backs.append(lambda g, s=a.shape: _unbroadcast(np.where(mask, g, 0.0), s))
    if isinstance(b, Var):
        parents.append(b)
        backs.append(lambda g, s=b.shape: _unbroadcast(np.where(mask, 0.0, g), s))
    return Var(out, tuple(parents), lambda g: tuple(f(g) for f in backs))


def maximum(a, b):
    """Elementwise max; ``b`` must be a constant. Ties keep ``a``."""
    return where(value(a) >= b, a, b)


def minimum(a, b):
    return where(value(a) <= b, a, b)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    if isinstance(x, Var):
        return x.sum(axis=axis)
    return np.sum(x, axis=axis)
