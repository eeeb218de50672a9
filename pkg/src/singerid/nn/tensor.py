"""Reverse-mode automatic differentiation over float64 numpy arrays.

Each operation returns a :class:`Tensor` that keeps references to its inputs
and a closure that maps the output gradient onto input gradients.  Calling
:meth:`Tensor.backward` on a scalar replays those closures in reverse
topological order (the tape).
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised as soon as NaN or Inf appears in a tensor value."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op=""):
        data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite value produced by {op or 'input'}")
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from .layers import add
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from .layers import mul
        return mul(self, other)

    __rmul__ = __mul__

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # intermediate gradients are not needed once propagated
                    node.grad = None


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data, parents, backward, op):
    """Build an op result; the backward closure is only kept when some input needs grad."""
    needs = any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, False, (), None, op)


def accumulate(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g
