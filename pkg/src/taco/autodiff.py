"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every operation on a :class:`Tensor` records its inputs and a
closure that propagates gradients, and ``backward()`` walks the recorded
graph once in reverse topological order. The primitive set is exactly what
MLP policies and the alignment lattice recursions need — arithmetic with
broadcasting, matmul, tanh, sigmoid, exp, a guarded log, sums, stacking,
indexing and a one-slot shift. No GPU, no convolutions, no dynamic shapes.

Graphs are one-shot: build, ``backward()`` once, read ``.grad`` off the
leaves. Rebuilding the same graph from identical leaf data is bit-for-bit
reproducible.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, StructuralError

# Inputs to log are clamped here so a zero probability never produces -inf
# and poisons every gradient upstream of it.
LOG_FLOOR = 1e-300

# Sigmoid inputs are clamped here; sigmoid(36) is already within one ulp of
# 1.0 but the clamp keeps outputs strictly inside (0, 1) for any finite input.
_SIGMOID_CLIP = 36.0


def _as_f64(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype == np.float64:
        return data
    return np.asarray(data, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("data", "grad", "_backward", "_prev")

    def __init__(self, data, _prev: tuple = ()):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[np.ndarray], None] | None = None
        self._prev = _prev

    # -- graph walk ------------------------------------------------------

    def backward(self) -> None:
        """Set ``.grad`` of every node in this graph to d(self)/d(node).

        Grads of all reachable nodes are cleared first, so calling backward
        on two graphs that share leaves never mixes their gradients.
        """
        if self.data.size != 1:
            raise StructuralError(
                f"backward seed must be scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited = {id(self)}
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, i = stack[-1]
            if i < len(node._prev):
                stack[-1] = (node, i + 1)
                child = node._prev[i]
                if id(child) not in visited:
                    visited.add(id(child))
                    stack.append((child, 0))
            else:
                topo.append(node)
                stack.pop()
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self) -> float:
        return float(self.data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = _lift(other)
        out = Tensor(self.data + other.data, (self, other))

        def back(g):
            _accum(self, _unbroadcast(g, self.data.shape))
            _accum(other, _unbroadcast(g, other.data.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = _lift(other)
        out = Tensor(self.data * other.data, (self, other))

        def back(g):
            _accum(self, _unbroadcast(g * other.data, self.data.shape))
            _accum(other, _unbroadcast(g * self.data, other.data.shape))

        out._backward = back
        return out

    __rmul__ = __mul__

    def __sub__(self, other):
        other = _lift(other)
        out = Tensor(self.data - other.data, (self, other))

        def back(g):
            _accum(self, _unbroadcast(g, self.data.shape))
            _accum(other, _unbroadcast(-g, other.data.shape))

        out._backward = back
        return out

    def __rsub__(self, other):
        return _lift(other) - self

    def __neg__(self):
        out = Tensor(-self.data, (self,))

        def back(g):
            _accum(self, -g)

        out._backward = back
        return out

    def __truediv__(self, other):
        other = _lift(other)
        out = Tensor(self.data / other.data, (self, other))

        def back(g):
            _accum(self, _unbroadcast(g / other.data, self.data.shape))
            _accum(
                other,
                _unbroadcast(-g * out.data / other.data, other.data.shape),
            )

        out._backward = back
        return out

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise StructuralError("only scalar exponents are supported")
        out = Tensor(self.data**n, (self,))

        def back(g):
            _accum(self, g * n * self.data ** (n - 1))

        out._backward = back
        return out

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        if b.ndim != 2 or a.ndim not in (1, 2):
            raise StructuralError(
                f"matmul supports (m,k)@(k,n) or (k,)@(k,n); got {a.shape}@{b.shape}"
            )
        if a.shape[-1] != b.shape[0]:
            raise StructuralError(f"matmul shape mismatch {a.shape}@{b.shape}")
        out = Tensor(a @ b, (self, other))

        if a.ndim == 2:

            def back(g):
                _accum(self, g @ b.T)
                _accum(other, a.T @ g)

        else:

            def back(g):
                _accum(self, g @ b.T)
                _accum(other, np.outer(a, g))

        out._backward = back
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], (self,))

        def back(g):
            z = np.zeros_like(self.data)
            z[idx] = g
            _accum(self, z)

        out._backward = back
        return out

    # -- nonlinearities ---------------------------------------------------

    def tanh(self):
        out = Tensor(np.tanh(self.data), (self,))

        def back(g):
            _accum(self, g * (1.0 - out.data * out.data))

        out._backward = back
        return out

    def sigmoid(self):
        x = np.clip(self.data, -_SIGMOID_CLIP, _SIGMOID_CLIP)
        out = Tensor(np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x))), (self,))

        def back(g):
            _accum(self, g * out.data * (1.0 - out.data))

        out._backward = back
        return out

    def exp(self):
        val = np.exp(self.data)
        if not np.all(np.isfinite(val)):
            raise NumericError("exp overflowed to a non-finite value")
        out = Tensor(val, (self,))

        def back(g):
            _accum(self, g * val)

        out._backward = back
        return out

    def log(self):
        clamped = np.maximum(self.data, LOG_FLOOR)
        out = Tensor(np.log(clamped), (self,))

        def back(g):
            _accum(self, g / clamped)

        out._backward = back
        return out

    # -- reductions & structure -------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        shape = self.data.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(self, np.broadcast_to(g, shape).copy())

        out._backward = back
        return out

    def shift1(self):
        """Shift a vector one slot to the right, filling with zero."""
        if self.data.ndim != 1:
            raise StructuralError("shift1 expects a 1-D tensor")
        val = np.empty_like(self.data)
        val[0] = 0.0
        val[1:] = self.data[:-1]
        out = Tensor(val, (self,))

        def back(g):
            z = np.zeros_like(self.data)
            z[:-1] = g[1:]
            _accum(self, z)

        out._backward = back
        return out


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack same-shaped tensors along a new axis."""
    ts = list(tensors)
    out = Tensor(np.stack([t.data for t in ts], axis=axis), tuple(ts))

    def back(g):
        for j, t in enumerate(ts):
            _accum(t, np.take(g, j, axis=axis))

    out._backward = back
    return out


def log_softmax(z: Tensor) -> Tensor:
    """Log-softmax over the last axis, stable under large logits."""
    # The max shift is a constant: its gradient contributions cancel exactly.
    m = Tensor(z.data.max(axis=-1, keepdims=True))
    shifted = z - m
    return shifted - shifted.exp().sum(axis=-1, keepdims=True).log()


GAUSS_LOG_NORM = 0.5 * math.log(2.0 * math.pi)


def gaussian_log_density(mean: Tensor, value: np.ndarray) -> Tensor:
    """Unit-variance diagonal Gaussian log density, summed over the last axis."""
    r = Tensor(value) - mean
    d = value.shape[-1]
    return (r * r).sum(axis=-1) * -0.5 - d * GAUSS_LOG_NORM


def finite_difference_check(
    build: Callable[[], Tensor], leaf: Tensor, step: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build`` must construct a fresh scalar graph from the current leaf data
    on every call. Error is |analytic - numeric| / max(1, |analytic|), taken
    over every entry of ``leaf``.
    """
    if step <= 0:
        raise StructuralError("finite difference step must be positive")
    out = build()
    if out.data.size != 1:
        raise StructuralError("finite_difference_check needs a scalar graph")
    leaf.grad = None  # backward only clears nodes reachable from this graph
    out.backward()
    analytic = (
        np.zeros_like(leaf.data) if leaf.grad is None else np.array(leaf.grad)
    )
    flat = leaf.data.reshape(-1)
    ga = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(build().data)
        flat[i] = orig - step
        lo = float(build().data)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * step)
        err = abs(numeric - ga[i]) / max(1.0, abs(ga[i]))
        if err > worst:
            worst = err
    return worst
