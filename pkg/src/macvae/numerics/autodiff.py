"""Tape-free reverse-mode differentiation over the small op set the models use.

Every op builds a :class:`Tensor` that remembers its parents and a closure
pushing the output gradient back to them. ``backward`` walks the graph in
reverse topological order. Values are float64 numpy arrays.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError, NumericalError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="const", requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_rows(self, index)

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        order = _topological(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(g, parent.value.shape)
                parent.grad = g if parent.grad is None else parent.grad + g


def leaf(value, name="param"):
    return Tensor(value, op=name, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value, parents, backward_fn, op):
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite output from op '{op}'", where=op)
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    return Tensor(value, parents, backward_fn, op)


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a, c: float):
    a = as_tensor(a)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def square(a):
    a = as_tensor(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a):
    """log(1 / (1 + e^-x)) without overflow for large |x|."""
    a = as_tensor(a)
    x = a.value
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * (1.0 - _sigmoid(x)),), "log_sigmoid")


def clamp(a, lo: float, hi: float):
    a = as_tensor(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,), "clamp")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
}


# -- reductions and linear algebra ------------------------------------------------

def total(a):
    a = as_tensor(a)
    shape = a.value.shape
    return _make(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape),), "sum")


def row_sum(a):
    """Sum over the last axis; (B, K) -> (B,)."""
    a = as_tensor(a)
    shape = a.value.shape
    return _make(a.value.sum(axis=-1), (a,), lambda g: (np.broadcast_to(g[..., None], shape),), "row_sum")


def _rowwise(x, w):
    # BLAS picks kernels by batch height, so a row's product can change with
    # the rows around it. einsum's plain loop keeps every row independent.
    return np.einsum("...j,jk->...k", x, w, optimize=False)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def back(g):
        return g @ bv.T, av.T @ g

    return _make(_rowwise(av, bv), (a, b), back, "matmul")


def affine(x, weight, bias):
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xv, wv = x.value, weight.value

    def back(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _make(_rowwise(xv, wv) + bias.value, (x, weight, bias), back, "affine")


def concat_cols(a, b):
    a, b = as_tensor(a), as_tensor(b)
    split = a.value.shape[1]
    return _make(np.concatenate([a.value, b.value], axis=1), (a, b),
                 lambda g: (g[:, :split], g[:, split:]), "concat")


def take_rows(a, index):
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.value.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), back, "take_rows")


def log_softmax(a):
    """Row-wise log-softmax of a (B, J) batch or a single (J,) vector."""
    a = as_tensor(a)
    x = a.value
    if x.shape[-1] == 0:
        raise ConfigError("softmax over an empty vector")
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), back, "log_softmax")


def set_mean(a, groups: Sequence[np.ndarray]):
    """Mean of the rows of ``a`` selected by each index group.

    Rows of each group are sorted column-wise before summing, so the result is
    bit-identical for any ordering of a group's members.
    """
    a = as_tensor(a)
    av = a.value
    n_out, width = len(groups), av.shape[1]
    out = np.empty((n_out, width))
    buckets: dict[int, list[int]] = {}
    for i, grp in enumerate(groups):
        buckets.setdefault(len(grp), []).append(i)
    plan = []
    for size, rows in sorted(buckets.items()):
        if size == 0:
            raise ConfigError("set_mean over an empty group")
        rows = np.asarray(rows, dtype=np.intp)
        idx = np.stack([np.asarray(groups[r], dtype=np.intp) for r in rows])
        plan.append((rows, idx, size))
        # chunked so a wide feature matrix never materialises in one block
        step = max(1, (1 << 22) // max(1, size * width))
        for lo in range(0, len(rows), step):
            block = np.sort(av[idx[lo:lo + step]], axis=1)
            out[rows[lo:lo + step]] = block.sum(axis=1) / size
    shape = av.shape

    def back(g):
        grad = np.zeros(shape)
        for rows, idx, size in plan:
            contrib = np.broadcast_to((g[rows] / size)[:, None, :], idx.shape + (width,))
            np.add.at(grad, idx, contrib)
        return (grad,)

    return _make(out, (a,), back, "set_mean")


# -- gaussian pieces --------------------------------------------------------------

def reparameterize(mean, logvar, noise):
    """mean + noise * exp(logvar / 2)."""
    mean, logvar = as_tensor(mean), as_tensor(logvar)
    eps = np.asarray(noise, dtype=np.float64)
    std = np.exp(0.5 * logvar.value)

    def back(g):
        return g, 0.5 * g * eps * std

    return _make(mean.value + eps * std, (mean, logvar), back, "reparameterize")


def gaussian_kl(mean, logvar):
    """KL(N(mean, e^logvar) || N(0, I)) summed over every entry."""
    mean, logvar = as_tensor(mean), as_tensor(logvar)
    mv, lv = mean.value, logvar.value
    var = np.exp(lv)
    value = -0.5 * np.sum(1.0 + lv - mv * mv - var)

    def back(g):
        return g * mv, 0.5 * g * (var - 1.0)

    return _make(np.asarray(value), (mean, logvar), back, "gaussian_kl")
