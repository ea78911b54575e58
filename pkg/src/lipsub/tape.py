"""A small reverse-mode tape over numpy arrays.

Only first-order vector-Jacobian products are implemented per primitive. Higher
derivatives (decoder Jacobians, reduced Hessians) are built as *values* on the
tape by the forward jets in :mod:`lipsub.jet`, so one reverse sweep yields the
parameter gradient of losses that contain them.

Every function in this module accepts plain arrays as well as :class:`Var`, and
returns a plain array when no input is a ``Var``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError

_ids = itertools.count()


class Var:
    __slots__ = ("value", "parents", "op", "id")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, parents=(), op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.op = op
        self.id = next(_ids)

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    size = property(lambda self: self.value.size)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    def __len__(self):
        return len(self.value)

    __add__ = lambda a, b: add(a, b)  # noqa: E731
    __radd__ = lambda a, b: add(b, a)  # noqa: E731
    __sub__ = lambda a, b: sub(a, b)  # noqa: E731
    __rsub__ = lambda a, b: sub(b, a)  # noqa: E731
    __mul__ = lambda a, b: mul(a, b)  # noqa: E731
    __rmul__ = lambda a, b: mul(b, a)  # noqa: E731
    __truediv__ = lambda a, b: div(a, b)  # noqa: E731
    __rtruediv__ = lambda a, b: div(b, a)  # noqa: E731
    __neg__ = lambda a: neg(a)  # noqa: E731
    __getitem__ = lambda a, key: getitem(a, key)  # noqa: E731

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(val, op, *links):
    parents = tuple((p, fn) for p, fn in links if isinstance(p, Var))
    if not parents:
        return val
    return Var(val, parents, op)


def add(a, b):
    va, vb = value(a), value(b)
    out = va + vb
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _node(out, "add", (a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb)))


def sub(a, b):
    va, vb = value(a), value(b)
    out = va - vb
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _node(out, "sub", (a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(-g, sb)))


def mul(a, b):
    va, vb = value(a), value(b)
    out = va * vb
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _node(
        out, "mul", (a, lambda g: _unbroadcast(g * vb, sa)), (b, lambda g: _unbroadcast(g * va, sb))
    )


def div(a, b):
    va, vb = value(a), value(b)
    out = va / vb
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _node(
        out,
        "div",
        (a, lambda g: _unbroadcast(g / vb, sa)),
        (b, lambda g: _unbroadcast(-g * out / vb, sb)),
    )


def neg(a):
    if not isinstance(a, Var):
        return -a
    return _node(-a.value, "neg", (a, lambda g: -g))


def power(a, p):
    p = float(p)
    if not isinstance(a, Var):
        return a**p
    va = a.value
    return _node(va**p, "pow", (a, lambda g: g * p * va ** (p - 1.0)))


def _unary(a, f, df, op):
    if not isinstance(a, Var):
        return f(a)
    va = a.value
    out = f(va)
    return _node(out, op, (a, lambda g: g * df(va, out)))


def exp(a):
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    return _unary(a, _sigmoid, lambda x, y: y * (1.0 - y), "sigmoid")


def softplus(a):
    """``log(1 + e^x) - log 2``: smooth, ELU-like, zero at the origin."""
    return _unary(a, lambda x: np.logaddexp(0.0, x) - np.log(2.0), lambda x, y: _sigmoid(x), "softplus")


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(float), "relu")


def step(a):
    """Heaviside step; treated as locally constant (zero derivative)."""
    return (value(a) > 0).astype(float)


def atan2(y, x):
    vy, vx = value(y), value(x)
    out = np.arctan2(vy, vx)
    if not (isinstance(y, Var) or isinstance(x, Var)):
        return out
    rho = vx * vx + vy * vy
    sy, sx = np.shape(vy), np.shape(vx)
    return _node(
        out,
        "atan2",
        (y, lambda g: _unbroadcast(g * vx / rho, sy)),
        (x, lambda g: _unbroadcast(-g * vy / rho, sx)),
    )


def sum_(a, axis=None, keepdims=False):
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    va = a.value
    out = np.sum(va, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, va.shape)

    return _node(out, "sum", (a, vjp))


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    old = a.value.shape
    return _node(a.value.reshape(shape), "reshape", (a, lambda g: g.reshape(old)))


def _is_fancy(key):
    if not isinstance(key, tuple):
        key = (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in key)


def getitem(a, key):
    if not isinstance(a, Var):
        return a[key]
    va = a.value
    fancy = _is_fancy(key)

    def vjp(g):
        z = np.zeros_like(va)
        if fancy:
            np.add.at(z, key, g)
        else:
            z[key] = g
        return z

    return _node(va[key], "getitem", (a, vjp))


def take(a, idx, axis=0):
    """Gather along ``axis`` with an integer index array."""
    if not isinstance(a, Var):
        return np.take(a, idx, axis=axis)
    va = a.value
    ax = axis % va.ndim

    def vjp(g):
        z = np.zeros_like(va)
        zm = np.moveaxis(z, ax, 0)
        np.add.at(zm, idx, np.moveaxis(g, ax, 0))
        return z

    return _node(np.take(va, idx, axis=ax), "take", (a, vjp))


def stack(items: Sequence, axis=0):
    vals = [value(x) for x in items]
    out = np.stack(vals, axis=axis)
    if not any(isinstance(x, Var) for x in items):
        return out
    ax = axis % out.ndim
    links = []
    for i, x in enumerate(items):
        links.append((x, lambda g, i=i: np.take(g, i, axis=ax)))
    return _node(out, "stack", *links)


def concatenate(items: Sequence, axis=0):
    vals = [value(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    if not any(isinstance(x, Var) for x in items):
        return out
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])
    links = []
    for i, x in enumerate(items):
        sl = [slice(None)] * out.ndim
        sl[ax] = slice(bounds[i], bounds[i + 1])
        links.append((x, lambda g, sl=tuple(sl): g[sl]))
    return _node(out, "concatenate", *links)


def _rowwise_linear(x, W):
    # each output entry is an independent contiguous reduction, so restricting
    # W to a subset of rows never changes the surviving entries
    lead = x.shape[:-1]
    xf = x.reshape(-1, x.shape[-1])
    out = np.empty((xf.shape[0], W.shape[0]))
    chunk = max(1, int(2**20 // max(1, W.size)))
    for s in range(0, xf.shape[0], chunk):
        out[s : s + chunk] = (xf[s : s + chunk, None, :] * W[None, :, :]).sum(axis=-1)
    return out.reshape(lead + (W.shape[0],))


def linear(x, W, b=None, rowwise=False):
    """``x @ W.T + b`` over the last axis of ``x`` (any number of leading axes).

    ``rowwise`` selects a slower contraction whose result for a given output
    row does not depend on which other rows are computed.
    """
    vx, vW = value(x), value(W)
    vb = value(b) if b is not None else None
    taped = isinstance(x, Var) or isinstance(W, Var) or isinstance(b, Var)
    if rowwise:
        out = _rowwise_linear(vx, vW)
    else:
        out = vx @ vW.T
    if vb is not None:
        out = out + vb
    if not taped:
        return out

    def gx(g):
        return g @ vW

    def gW(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g2.T @ vx.reshape(-1, vx.shape[-1])

    def gb(g):
        return g.reshape(-1, g.shape[-1]).sum(axis=0)

    links = [(x, gx), (W, gW)]
    if b is not None:
        links.append((b, gb))
    return _node(out, "linear", *links)


# ---------------------------------------------------------------------------


def _topo(out: Var):
    seen = {}
    stack_ = [out]
    while stack_:
        node = stack_.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        for p, _ in node.parents:
            if p.id not in seen:
                stack_.append(p)
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(out: Var, wrt: Sequence[Var], grad_out=None):
    """Gradients of ``out`` (scalar unless ``grad_out`` is given) w.r.t. ``wrt``."""
    if not isinstance(out, Var):
        return [np.zeros_like(w.value) for w in wrt]
    g0 = np.ones_like(out.value) if grad_out is None else np.asarray(grad_out, dtype=float)
    want = {w.id for w in wrt}
    grads = {out.id: g0}
    result = {}
    for node in _topo(out):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.id in want:
            result[node.id] = g
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = grads.get(parent.id)
            grads[parent.id] = contrib if prev is None else prev + contrib
    return [np.array(result[w.id]) if w.id in result else np.zeros_like(w.value) for w in wrt]


def first_nonfinite(out: Var):
    """The earliest recorded node whose value is not finite, or ``None``."""
    if not isinstance(out, Var):
        return None
    for node in reversed(_topo(out)):
        if not np.all(np.isfinite(node.value)):
            return node
    return None


class LossTape:
    """A recorded scalar loss over a list of parameter arrays.

    ``fn`` maps a list of parameters (``Var`` during recording) to a scalar.
    """

    def __init__(self, fn: Callable, params: Sequence[np.ndarray]):
        self.fn = fn
        self.params = [np.asarray(p, dtype=float) for p in params]
        self.leaves = [Var(p) for p in self.params]
        self.output = fn(self.leaves)
        val = value(self.output)
        if np.ndim(val) != 0:
            raise ValueError("loss must be a scalar")
        if not np.isfinite(val):
            bad = first_nonfinite(self.output)
            where = f"tape node #{bad.id} ({bad.op}, shape {bad.value.shape})" if bad is not None else "loss"
            raise NumericError(f"non-finite value produced at {where}")

    @property
    def value(self) -> float:
        return float(value(self.output))

    def gradient(self):
        return backward(self.output, self.leaves)

    def replay(self) -> float:
        return float(value(self.fn(self.params)))
