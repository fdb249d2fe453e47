"""Minimal reverse-mode automatic differentiation over numpy arrays.

The engine records a tape of operations as :class:`Tensor` nodes and
computes exact gradients of a scalar loss by walking the tape in reverse
topological order.  It implements only the operations the model needs
(dense linear algebra, a handful of pointwise nonlinearities, softmax,
embedding gather/scatter) and favours clarity over generality: every
backward rule is a few lines of numpy that can be checked against
central finite differences.

Gradients have the same dtype as the forward data, so the same graph
runs in float32 for training and float64 for gradient verification.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "exp",
    "log",
    "gelu",
    "softmax",
    "where_mask",
    "clip_min",
    "embedding",
    "gather2",
    "scatter_add2",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node on the tape: a numpy array plus an optional backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- construction -------------------------------------------------

    @staticmethod
    def _op(data, parents, backward):
        """Create a result node, recording the tape edge only if needed."""
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # -- basic properties ----------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- backward ------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded tape."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            # Python scalars stay weak so float32 data is not promoted.
            def bwd_c(g):
                self._accumulate(g)

            return Tensor._op(self.data + other, (self,), bwd_c)
        other = as_tensor(other)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._op(self.data + other.data, (self, other), bwd)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            def bwd_c(g):
                self._accumulate(g * other)

            return Tensor._op(self.data * other, (self,), bwd_c)
        other = as_tensor(other)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._op(self.data * other.data, (self, other), bwd)

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            def bwd_c(g):
                self._accumulate(g)

            return Tensor._op(self.data - other, (self,), bwd_c)
        other = as_tensor(other)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.shape))

        return Tensor._op(self.data - other.data, (self, other), bwd)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            def bwd_c(g):
                self._accumulate(-g)

            return Tensor._op(other - self.data, (self,), bwd_c)
        return as_tensor(other) - self

    def __neg__(self):
        def bwd(g):
            self._accumulate(-g)

        return Tensor._op(-self.data, (self,), bwd)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / other)
        other = as_tensor(other)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.shape)
                )

        return Tensor._op(self.data / other.data, (self, other), bwd)

    def __rtruediv__(self, other):
        if isinstance(other, (int, float)):
            def bwd_c(g):
                self._accumulate(-g * other / (self.data * self.data))

            return Tensor._op(other / self.data, (self,), bwd_c)
        return as_tensor(other) / self

    def __pow__(self, exponent):
        """Elementwise power with a constant scalar exponent."""
        exponent = float(exponent)

        def bwd(g):
            if exponent == 0.0:
                # constant 1; avoid 0 * x**-1 producing NaN at x = 0
                self._accumulate(np.zeros_like(self.data))
                return
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return Tensor._op(self.data**exponent, (self,), bwd)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must have ndim >= 2")

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g @ b.swapaxes(-1, -2), self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(a.swapaxes(-1, -2) @ g, other.shape))

        return Tensor._op(a @ b, (self, other), bwd)

    # -- reductions and shape ops ----------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return Tensor._op(self.data.sum(axis=axis, keepdims=keepdims), (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            n = int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape) / n)

        return Tensor._op(self.data.mean(axis=axis, keepdims=keepdims), (self,), bwd)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def bwd(g):
            self._accumulate(g.reshape(self.shape))

        return Tensor._op(self.data.reshape(shape), (self,), bwd)

    def swapaxes(self, a: int, b: int):
        def bwd(g):
            self._accumulate(g.swapaxes(a, b))

        return Tensor._op(self.data.swapaxes(a, b), (self,), bwd)

    @property
    def T(self):
        if self.ndim != 2:
            raise ValueError("T is defined for 2-D tensors only")
        return self.swapaxes(0, 1)


def as_tensor(value) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# -- pointwise functions ----------------------------------------------


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def bwd(g):
        x._accumulate(g * out_data)

    return Tensor._op(out_data, (x,), bwd)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def bwd(g):
        x._accumulate(g / x.data)

    return Tensor._op(np.log(x.data), (x,), bwd)


# Python floats, not numpy scalars: they must not promote float32 data.
_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        x._accumulate(g * (cdf + x.data * pdf))

    return Tensor._op((x.data * cdf).astype(x.dtype), (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``.

    Entries equal to -inf produce exact zeros; a slice must contain at
    least one finite entry.
    """
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return Tensor._op(out_data, (x,), bwd)


def where_mask(x: Tensor, mask: np.ndarray, fill: float) -> Tensor:
    """Keep ``x`` where ``mask`` is true, use the constant ``fill`` elsewhere."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)

    def bwd(g):
        x._accumulate(_unbroadcast(np.where(mask, g, 0.0), x.shape))

    return Tensor._op(np.where(mask, x.data, np.asarray(fill, dtype=x.dtype)), (x,), bwd)


def clip_min(x: Tensor, lo: float) -> Tensor:
    """Elementwise max(x, lo); gradient is zero on the clamped branch."""
    x = as_tensor(x)

    def bwd(g):
        x._accumulate(g * (x.data > lo))

    return Tensor._op(np.maximum(x.data, lo), (x,), bwd)


# -- gather / scatter --------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; the backward pass scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids)

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accumulate(gt)

    return Tensor._op(table.data[ids], (table,), bwd)


def gather2(x: Tensor, idx0: np.ndarray, idx1: np.ndarray) -> Tensor:
    """Pick entries (or rows) ``x[idx0[i], idx1[i]]`` for each i."""
    x = as_tensor(x)
    idx0 = np.asarray(idx0)
    idx1 = np.asarray(idx1)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (idx0, idx1), g)
        x._accumulate(gx)

    return Tensor._op(x.data[idx0, idx1], (x,), bwd)


def scatter_add2(x: Tensor, idx0: np.ndarray, idx1: np.ndarray, rows: Tensor) -> Tensor:
    """Return a copy of ``x`` with ``rows[i]`` added at ``[idx0[i], idx1[i]]``."""
    x = as_tensor(x)
    rows = as_tensor(rows)
    idx0 = np.asarray(idx0)
    idx1 = np.asarray(idx1)
    out_data = x.data.copy()
    np.add.at(out_data, (idx0, idx1), rows.data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g)
        if rows.requires_grad:
            rows._accumulate(g[idx0, idx1])

    return Tensor._op(out_data, (x, rows), bwd)
