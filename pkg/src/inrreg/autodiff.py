"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

The engine records a DAG of operations on `Tensor` nodes and computes
adjoints of a scalar loss with respect to every reachable leaf in one
reverse topological sweep.  The operation set is deliberately small: it is
the closure needed by sine-MLP forward passes, closed-form input-derivative
propagation, and the similarity/regularization losses built on top.

Two float modes are supported: float32 (training) and float64
(verification against finite differences).  Ops preserve the dtype of
their inputs; python scalars are promoted to the other operand's dtype.
"""

from __future__ import annotations

import itertools

import numpy as np


class AutodiffError(Exception):
    """Base class for engine failures."""


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


# Global finite-check switch; the training loop relies on it to abort on NaN.
CHECK_FINITE = True

_ids = itertools.count()


class Tensor:
    """A node in the computation graph holding a dense numpy array."""

    __slots__ = ("data", "grad", "parents", "_backward", "requires_grad",
                 "op", "id", "name")

    def __init__(self, data, parents=(), backward=None, requires_grad=False,
                 op="leaf", name=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self.id = next(_ids)
        self.name = name
        if CHECK_FINITE and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite output of op '{op}' (node {self.id})")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    # Operator sugar used throughout the higher-level modules.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"


def tensor(data, dtype=None, requires_grad=False, name=None):
    """Wrap an array-like as a graph leaf."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def parameter(data, name=None):
    return tensor(data, requires_grad=True, name=name)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)

    def bwd(out):
        if a.requires_grad:
            a.accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(out.grad, b.shape))

    return Tensor(a.data + b.data, (a, b), bwd, op="add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)

    def bwd(out):
        if a.requires_grad:
            a.accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-out.grad, b.shape))

    return Tensor(a.data - b.data, (a, b), bwd, op="sub")


def mul(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)

    def bwd(out):
        if a.requires_grad:
            a.accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(out.grad * a.data, b.shape))

    return Tensor(a.data * b.data, (a, b), bwd, op="mul")


def div(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)

    def bwd(out):
        if a.requires_grad:
            a.accumulate(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data),
                                      b.shape))

    # a zero divisor is reported as NonFiniteError by the Tensor check, so
    # numpy's own warning is redundant noise
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return Tensor(out, (a, b), bwd, op="div")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bwd(out):
        if a.requires_grad:
            a.accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ out.grad)

    return Tensor(a.data @ b.data, (a, b), bwd, op="matmul")


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def sin(a):
    def bwd(out):
        if a.requires_grad:
            a.accumulate(out.grad * np.cos(a.data))

    return Tensor(np.sin(a.data), (a,), bwd, op="sin")


def cos(a):
    def bwd(out):
        if a.requires_grad:
            a.accumulate(-out.grad * np.sin(a.data))

    return Tensor(np.cos(a.data), (a,), bwd, op="cos")


def exp(a):
    out_data = np.exp(a.data)

    def bwd(out):
        if a.requires_grad:
            a.accumulate(out.grad * out.data)

    return Tensor(out_data, (a,), bwd, op="exp")


def sqrt(a):
    out_data = np.sqrt(a.data)

    def bwd(out):
        if a.requires_grad:
            a.accumulate(out.grad * (0.5 / out.data))

    return Tensor(out_data, (a,), bwd, op="sqrt")


def absval(a):
    def bwd(out):
        if a.requires_grad:
            a.accumulate(out.grad * np.sign(a.data))

    return Tensor(np.abs(a.data), (a,), bwd, op="abs")


def square(a):
    def bwd(out):
        if a.requires_grad:
            a.accumulate(out.grad * (2.0 * a.data))

    return Tensor(a.data * a.data, (a,), bwd, op="square")


def max_with_constant(a, c):
    """Elementwise max(a, c); subgradient 0 exactly at the kink."""
    c = float(c)
    mask = a.data > c

    def bwd(out):
        if a.requires_grad:
            a.accumulate(out.grad * mask)

    return Tensor(np.maximum(a.data, c), (a,), bwd, op="max_with_constant")


def silu(a):
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(out):
        if a.requires_grad:
            a.accumulate(out.grad * (s * (1.0 + a.data * (1.0 - s))))

    return Tensor(a.data * s, (a,), bwd, op="silu")


# ---------------------------------------------------------------------------
# reductions and structure

def summation(a, axis=None, keepdims=False):
    def bwd(out):
        if not a.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape))

    return Tensor(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bwd,
                  op="sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]

    def bwd(out):
        if not a.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape) / n)

    return Tensor(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bwd,
                  op="mean")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale/shift by learnable gain/bias."""
    d = x.shape[-1]
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(out):
        g = out.grad
        if gain.requires_grad:
            red = tuple(range(g.ndim - 1))
            gain.accumulate((g * xhat).sum(axis=red))
        if bias.requires_grad:
            red = tuple(range(g.ndim - 1))
            bias.accumulate(g.sum(axis=red))
        if x.requires_grad:
            dxhat = g * gain.data
            sum_d = dxhat.sum(axis=-1, keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=-1, keepdims=True)
            x.accumulate((inv / d) * (d * dxhat - sum_d - xhat * sum_dx))

    return Tensor(xhat * gain.data + bias.data, (x, gain, bias), bwd,
                  op="layer_norm")


def col(a, j):
    """Select column j of a 2-D tensor (linear gather with scatter adjoint)."""
    if a.data.ndim != 2:
        raise ShapeError(f"col expects a 2-D tensor, got {a.shape}")

    def bwd(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[:, j] = out.grad
            a.accumulate(g)

    return Tensor(a.data[:, j].copy(), (a,), bwd, op="col")


def det3_from_entries(m):
    """Determinant of a 3x3 matrix given as nine channels m[i][j].

    Composed entirely from mul/sub/add nodes (cofactor expansion along the
    first row), so the adjoint needs no dedicated rule.
    """
    c0 = sub(mul(m[1][1], m[2][2]), mul(m[1][2], m[2][1]))
    c1 = sub(mul(m[1][0], m[2][2]), mul(m[1][2], m[2][0]))
    c2 = sub(mul(m[1][0], m[2][1]), mul(m[1][1], m[2][0]))
    return add(sub(mul(m[0][0], c0), mul(m[0][1], c1)), mul(m[0][2], c2))


# ---------------------------------------------------------------------------
# backward pass

def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in visited:
            continue
        visited.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Backpropagate from a scalar loss.

    Populates `.grad` on every reachable node that requires gradients.  When
    `params` is given, returns {param.id: grad array} with zeros filled in
    for parameters the loss does not depend on.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    if params is None:
        return None
    out = {}
    for p in params:
        out[p.id] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def free_graph(loss):
    """Drop cached activations/closures so a finished graph can be collected."""
    for node in _toposort(loss):
        node._backward = None
        node.parents = ()
