"""Minimal reverse-mode autodiff over float64 numpy arrays.

Everything here exists to back the pruning-training loop: the loss is built
as a graph of `Var` nodes and `backward` accumulates exact gradients of the
scalar root into every reachable leaf. Only the ops the training graph needs
are provided. Operands that are plain numpy arrays (or scalars) are treated
as constants; no gradient flows into them.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A node in the computation graph.

    `value` is always a float64 ndarray. `grad` is filled by `backward` and
    has the same shape as `value`.
    """

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(value, inputs, grad_fns):
    """Build a Var from `inputs`, keeping only Var operands as parents.

    `grad_fns[i]` maps the upstream gradient to the gradient of input i; it is
    evaluated only for inputs that are Vars.
    """
    parents = tuple(x for x in inputs if isinstance(x, Var))
    if not parents:
        return Var(value)
    keep = [i for i, x in enumerate(inputs) if isinstance(x, Var)]

    def vjp(g):
        return tuple(grad_fns[i](g) for i in keep)

    return Var(value, parents, vjp)


def add(a, b):
    av, bv = _val(a), _val(b)
    return _node(av + bv, (a, b), (
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(g, bv.shape),
    ))


def sub(a, b):
    av, bv = _val(a), _val(b)
    return _node(av - bv, (a, b), (
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(-g, bv.shape),
    ))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _node(av * bv, (a, b), (
        lambda g: _unbroadcast(g * bv, av.shape),
        lambda g: _unbroadcast(g * av, bv.shape),
    ))


def div(a, b):
    av, bv = _val(a), _val(b)
    return _node(av / bv, (a, b), (
        lambda g: _unbroadcast(g / bv, av.shape),
        lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape),
    ))


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    out = av @ bv
    return _node(out, (a, b), (
        lambda g: _unbroadcast(g @ bv.swapaxes(-1, -2), av.shape),
        lambda g: _unbroadcast(av.swapaxes(-1, -2) @ g, bv.shape),
    ))


def pow_const(a, p: float):
    av = _val(a)
    out = av ** p
    return _node(out, (a,), (lambda g: g * p * av ** (p - 1),))


def exp(a):
    out = np.exp(_val(a))
    return _node(out, (a,), (lambda g: g * out,))


def log(a):
    av = _val(a)
    return _node(np.log(av), (a,), (lambda g: g / av,))


def sigmoid(a):
    av = _val(a)
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ex = np.exp(av[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), (lambda g: g * out * (1.0 - out),))


def silu(a):
    av = _val(a)
    s = 1.0 / (1.0 + np.exp(-np.clip(av, -700, 700)))
    out = av * s
    return _node(out, (a,), (lambda g: g * s * (1.0 + av * (1.0 - s)),))


def absolute(a):
    av = _val(a)
    return _node(np.abs(av), (a,), (lambda g: g * np.sign(av),))


def clamp(a, lo: float, hi: float):
    av = _val(a)
    out = np.clip(av, lo, hi)
    mask = (av > lo) & (av < hi)
    return _node(out, (a,), (lambda g: g * mask,))


def vsum(a, axis=None, keepdims=False):
    av = _val(a)

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, av.shape).copy()

    return _node(av.sum(axis=axis, keepdims=keepdims), (a,), (grad,))


def vmean(a, axis=None, keepdims=False):
    av = _val(a)
    if axis is None:
        n = av.size
    elif isinstance(axis, tuple):
        n = int(np.prod([av.shape[i] for i in axis]))
    else:
        n = av.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    av = _val(a)
    return _node(av.reshape(shape), (a,), (lambda g: g.reshape(av.shape),))


def swapaxes(a, ax1: int, ax2: int):
    av = _val(a)
    return _node(av.swapaxes(ax1, ax2), (a,), (lambda g: g.swapaxes(ax1, ax2),))


def concat(parts, axis: int):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]
    grad_fns = []
    for i in range(len(parts)):
        def grad(g, i=i):
            return np.split(g, splits, axis=axis)[i]
        grad_fns.append(grad)
    return _node(out, tuple(parts), tuple(grad_fns))


def softmax(a, axis: int = -1):
    av = _val(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _node(out, (a,), (grad,))


def log_softmax(a, axis: int = -1):
    av = _val(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def grad(g):
        return g - p * g.sum(axis=axis, keepdims=True)

    return _node(out, (a,), (grad,))


def slice_last(a, start: int, stop: int):
    """Contiguous slice of the last axis."""
    av = _val(a)

    def grad(g):
        acc = np.zeros_like(av)
        acc[..., start:stop] = g
        return acc

    return _node(av[..., start:stop], (a,), (grad,))


def take0(a, idx):
    """Fancy-index the first axis; backward scatter-adds (duplicates ok)."""
    av = _val(a)
    idx = np.asarray(idx)
    out = av[idx]

    def grad(g):
        acc = np.zeros_like(av)
        np.add.at(acc, idx, g)
        return acc

    return _node(out, (a,), (grad,))


def gather_last(a, idx):
    """np.take_along_axis on the last axis with an integer index array."""
    av = _val(a)
    idx = np.asarray(idx)
    out = np.take_along_axis(av, idx, axis=-1)

    def grad(g):
        acc = np.zeros_like(av)
        lead = tuple(np.indices(idx.shape)[:-1]) if idx.ndim > 1 else ()
        np.add.at(acc, (*lead, idx), g)
        return acc

    return _node(out, (a,), (grad,))


def backward(root: Var) -> None:
    """Accumulate d(root)/d(leaf) into `.grad` of every Var in the graph.

    `root` must be scalar-valued. Existing grads are overwritten.
    """
    if root.value.size != 1:
        raise ValueError("backward expects a scalar root")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            g = np.asarray(g, dtype=np.float64)
            parent.grad = g if parent.grad is None else parent.grad + g


def finite_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x (testing oracle)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g
