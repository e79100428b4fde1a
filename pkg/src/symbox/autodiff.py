"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op result records its parents and a closure mapping the output gradient
to parent gradients. Nodes carry a creation sequence number; since a node can
only be built from nodes that already exist, creation order is a topological
order, and :func:`backward` simply walks the reachable nodes in reverse.

All data is float64. Any op producing a non-finite value raises
:class:`~symbox.errors.NumericError` naming the op.

Kinked primitives use the subgradient convention ``sign(0) := 0``:
``relu'(0) = 0``, ``abs'(0) = 0``, and ``maximum(x, c)``/``minimum(x, c)`` pass no
gradient at a tie.
"""
from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from .errors import InvalidArgumentError, NumericError

_seq = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_seq")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite result in op '{op}'", op=op)
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, *arrays):
    try:
        return np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError as exc:
        raise InvalidArgumentError(f"{op}: incompatible shapes {[a.shape for a in arrays]}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _node(out, (a,), bw, "sqrt")


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    _check_broadcast("atan2", y, x)
    out = np.arctan2(y.data, x.data)

    def bw(g):
        r2 = x.data * x.data + y.data * y.data
        with np.errstate(divide="ignore", invalid="ignore"):
            gy = np.where(r2 > 0, x.data / r2, 0.0)
            gx = np.where(r2 > 0, -y.data / r2, 0.0)
        return _unbroadcast(g * gy, y.shape), _unbroadcast(g * gx, x.shape)

    return _node(out, (y, x), bw, "atan2")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """``log(1 + exp(a))`` evaluated without overflow."""
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bw(g):
        s = np.empty_like(a.data)
        pos = a.data >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        e = np.exp(a.data[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)

    return _node(out, (a,), bw, "softplus")


def maximum(a, c: float) -> Tensor:
    """Elementwise ``max(a, c)`` against a constant."""
    a = as_tensor(a)
    c = np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64)
    mask = a.data > c
    return _node(np.where(mask, a.data, np.broadcast_to(c, a.shape)), (a,), lambda g: (g * mask,), "maximum")


def minimum(a, c: float) -> Tensor:
    """Elementwise ``min(a, c)`` against a constant."""
    a = as_tensor(a)
    c = np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64)
    mask = a.data < c
    return _node(np.where(mask, a.data, np.broadcast_to(c, a.shape)), (a,), lambda g: (g * mask,), "minimum")


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (Huber with slope 1) of a residual."""
    a = as_tensor(a)
    ad = np.abs(a.data)
    if beta <= 0:
        return abs(a)
    small = ad < beta
    out = np.where(small, 0.5 * a.data * a.data / beta, ad - 0.5 * beta)
    return _node(out, (a,), lambda g: (g * np.where(small, a.data / beta, np.sign(a.data)),), "smooth_l1")


# ---------------------------------------------------------------- reductions & shape

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / n) if n else _node(np.zeros(()), (a,), lambda g: (np.zeros(a.shape),), "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise InvalidArgumentError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    """Basic slicing and integer-array indexing."""
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out), (a,), bw, "slice")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise InvalidArgumentError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return _node(out, ts, bw, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1)),)
    return _node(out, (x,), bw, "upsample2")


def conv2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1.

    ``x`` is (N, C, H, W), ``weight`` is (O, C, 3, 3), ``bias`` is (O,). Internally the
    im2col buffer is channels-last, built from nine shifted slices.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if stride not in (1, 2):
        raise InvalidArgumentError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (3, 3) or weight.shape[1] != x.shape[1]:
        raise InvalidArgumentError(f"conv2d: bad shapes x={x.shape} weight={weight.shape}")
    n, c, h, w = x.shape
    o = weight.shape[0]
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = np.zeros((n, h + 2, w + 2, c))
    xp[:, 1:-1, 1:-1, :] = x.data.transpose(0, 2, 3, 1)
    taps = [(ki, kj) for ki in range(3) for kj in range(3)]
    cols = np.empty((n, ho, wo, 9, c))
    for t, (ki, kj) in enumerate(taps):
        cols[:, :, :, t, :] = xp[:, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride, :]
    cols = cols.reshape(n * ho * wo, 9 * c)
    # weight (O, C, 3, 3) -> (9*C, O) matching the (tap, channel) column order
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(9 * c, o)
    out = cols @ wmat
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, weight] + ([bias] if bias is not None else [])

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (cols.T @ gm).reshape(3, 3, c, o).transpose(3, 2, 0, 1) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat.T).reshape(n, ho, wo, 9, c)
            dxp = np.zeros((n, h + 2, w + 2, c))
            for t, (ki, kj) in enumerate(taps):
                dxp[:, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, t, :]
            gx = dxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    return _node(out, parents, bw, "conv2d")


# ---------------------------------------------------------------- backward

def backward(root: Tensor) -> dict:
    """Accumulate ``d root / d leaf`` into every reachable leaf's ``.grad``.

    Returns a mapping from leaf to gradient array as well.
    """
    if root.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    nodes, seen, stack_ = [], set(), [root]
    while stack_:
        n = stack_.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        nodes.append(n)
        stack_.extend(p for p in n._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    grads = {id(root): np.ones(root.shape)}
    leaves = {}
    for n in nodes:
        g = grads.pop(id(n), None)
        if g is None:
            continue
        if n._backward is None:
            n.grad = g if n.grad is None else n.grad + g
            leaves[n] = n.grad
            continue
        for p, pg in zip(n._parents, n._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return leaves


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    Relative error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0



