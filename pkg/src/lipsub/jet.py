"""Second-order forward jets.

A :class:`Jet` carries a value together with its first derivatives along ``k``
input directions and its second derivatives for a fixed list of direction
pairs ``(I[p], J[p])``. Components may be numpy arrays or tape ``Var`` objects,
so pushing a jet through taped parameters records the Jacobian and Hessian
themselves on the tape.

Layout: ``v`` has shape ``S``; ``d`` has shape ``(k,) + S``; ``dd`` has shape
``(P,) + S`` or is ``None`` for first-order jets. Index jets with keys such as
``x[..., 0, 1]`` and reduce with negative axes.

The generic functions at the bottom (``sqrt``, ``atan2``, ``relu``, ...) accept
jets, tape variables and plain arrays alike so that energy densities are written
once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tape as T


@dataclass(frozen=True)
class Pairs:
    k: int
    I: np.ndarray  # noqa: E741
    J: np.ndarray

    @property
    def count(self) -> int:
        return int(self.I.size)

    @classmethod
    def upper(cls, k: int) -> "Pairs":
        """All pairs ``i <= j``, row-major."""
        I, J = np.triu_indices(k)  # noqa: E741
        return cls(k, I.astype(np.int64), J.astype(np.int64))

    @classmethod
    def single(cls) -> "Pairs":
        return cls(2, np.array([0]), np.array([1]))


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _shape(x):
    return np.shape(T.value(x))


class Jet:
    __slots__ = ("v", "d", "dd", "pairs")
    __array_ufunc__ = None

    def __init__(self, v, d, dd=None, pairs: Optional[Pairs] = None):
        self.v = v
        self.d = d
        self.dd = dd
        self.pairs = pairs

    @property
    def order(self) -> int:
        return 2 if self.pairs is not None else 1

    @property
    def shape(self):
        return _shape(self.v)

    @property
    def ndim(self):
        return len(self.shape)

    # -- construction -------------------------------------------------------

    @classmethod
    def seed(cls, x, directions, pairs: Optional[Pairs] = None) -> "Jet":
        """Jet of the input itself: ``d[i] = directions[i]`` broadcast over ``x``."""
        directions = np.asarray(directions, dtype=float)
        xs = _shape(x)
        d = np.broadcast_to(directions.reshape((directions.shape[0],) + (1,) * (len(xs) - 1) + xs[-1:]),
                            (directions.shape[0],) + xs).copy()
        return cls(x, d, None, pairs)

    def _like(self, v, d, dd):
        return Jet(v, d, dd, self.pairs)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Jet):
            return self._like(self.v + other.v, self.d + other.d, _add(self.dd, other.dd))
        return self._like(self.v + other, self.d, self.dd)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Jet):
            dd = _add(self.dd, None if other.dd is None else -other.dd)
            return self._like(self.v - other.v, self.d - other.d, dd)
        return self._like(self.v - other, self.d, self.dd)

    def __rsub__(self, other):
        return self._like(other - self.v, -self.d, None if self.dd is None else -self.dd)

    def __neg__(self):
        return self._like(-self.v, -self.d, None if self.dd is None else -self.dd)

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return self._like(self.v * other, self.d * other, None if self.dd is None else self.dd * other)
        a, b = self, other
        v = a.v * b.v
        d = a.v * b.d + b.v * a.d
        dd = None
        if a.pairs is not None:
            I, J = a.pairs.I, a.pairs.J  # noqa: E741
            cross = T.take(a.d, I, 0) * T.take(b.d, J, 0) + T.take(a.d, J, 0) * T.take(b.d, I, 0)
            dd = _add(_add(None if b.dd is None else a.v * b.dd, None if a.dd is None else b.v * a.dd), cross)
        return self._like(v, d, dd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * reciprocal(other)
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return reciprocal(self) * other

    def __pow__(self, p):
        if p == 2:
            return self * self
        p = float(p)
        return self.unary(self.v**p, p * self.v ** (p - 1.0), p * (p - 1.0) * self.v ** (p - 2.0))

    def unary(self, f0, f1, f2=None):
        """Chain rule for a scalar function given its value and two derivatives."""
        d = f1 * self.d
        dd = None
        if self.pairs is not None:
            I, J = self.pairs.I, self.pairs.J  # noqa: E741
            dd = f2 * (T.take(self.d, I, 0) * T.take(self.d, J, 0))
            if self.dd is not None:
                dd = f1 * self.dd + dd
        return self._like(f0, d, dd)

    # -- structure ----------------------------------------------------------

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        dkey = key if (key and key[0] is Ellipsis) else (slice(None),) + key
        return self._like(self.v[key], self.d[dkey],
                          None if self.dd is None else self.dd[dkey])

    def _axis(self, axis):
        return axis if axis < 0 else axis + 1

    def sum(self, axis=None):
        if axis is None:
            axes = tuple(range(-self.ndim, 0))
        elif isinstance(axis, tuple):
            axes = tuple(a if a < 0 else a - self.ndim for a in axis)
        else:
            axes = (axis if axis < 0 else axis - self.ndim,)
        return self._like(T.sum_(self.v, axis=axes), T.sum_(self.d, axis=axes),
                          None if self.dd is None else T.sum_(self.dd, axis=axes))

    def take(self, idx, axis=-1):
        axis = axis if axis < 0 else axis - self.ndim
        return self._like(T.take(self.v, idx, axis), T.take(self.d, idx, axis),
                          None if self.dd is None else T.take(self.dd, idx, axis))

    def map_linear(self, fn):
        """Apply a linear map (acting on trailing axes) to every component."""
        return self._like(fn(self.v), fn(self.d), None if self.dd is None else fn(self.dd))

    def gradient(self):
        """First derivatives with the direction axis moved last: ``S + (k,)``."""
        return _moveaxis0_last(self.d)

    def hessian(self):
        """Full ``S + (k, k)`` matrix from upper-triangle pairs."""
        if self.pairs is None or self.dd is None:
            raise ValueError("jet carries no second derivatives")
        k = self.pairs.k
        dd = T.value(self.dd)
        out = np.zeros(dd.shape[1:] + (k, k))
        out[..., self.pairs.I, self.pairs.J] = np.moveaxis(dd, 0, -1)
        out[..., self.pairs.J, self.pairs.I] = np.moveaxis(dd, 0, -1)
        return out


def _moveaxis0_last(x):
    if isinstance(x, T.Var):
        raise TypeError("use Jet.d directly on taped jets")
    return np.moveaxis(x, 0, -1)


def pair_matrix_index(k: int, pairs: Pairs) -> np.ndarray:
    """``(k, k)`` index into the pair axis, symmetric."""
    idx = np.empty((k, k), dtype=np.int64)
    idx[pairs.I, pairs.J] = np.arange(pairs.count)
    idx[pairs.J, pairs.I] = np.arange(pairs.count)
    return idx


# ---------------------------------------------------------------------------
# generic functions


def value(x):
    return x.v if isinstance(x, Jet) else x


def reciprocal(x):
    if isinstance(x, Jet):
        r = 1.0 / x.v
        return x.unary(r, -(r * r), 2.0 * r * r * r)
    return 1.0 / x


def sqrt(x):
    if isinstance(x, Jet):
        s = T.sqrt(x.v)
        f1 = 0.5 / s
        return x.unary(s, f1, -0.25 / (s * x.v))
    return T.sqrt(x)


def exp(x):
    if isinstance(x, Jet):
        e = T.exp(x.v)
        return x.unary(e, e, e)
    return T.exp(x)


def log(x):
    if isinstance(x, Jet):
        r = 1.0 / x.v
        return x.unary(T.log(x.v), r, -(r * r))
    return T.log(x)


def softplus(x):
    if isinstance(x, Jet):
        s = T.sigmoid(x.v)
        return x.unary(T.softplus(x.v), s, s * (1.0 - s))
    return T.softplus(x)


def tanh(x):
    if isinstance(x, Jet):
        t = T.tanh(x.v)
        f1 = 1.0 - t * t
        return x.unary(t, f1, -2.0 * t * f1)
    return T.tanh(x)


def relu(x):
    if isinstance(x, Jet):
        s = T.step(x.v)
        return x.unary(T.relu(x.v), s, 0.0 * s)
    return T.relu(x)


def atan2(y, x):
    """``atan2`` with full second-order propagation when either argument is a jet."""
    if not isinstance(y, Jet) and not isinstance(x, Jet):
        return T.atan2(y, x)
    ref = y if isinstance(y, Jet) else x
    yv, xv = value(y), value(x)
    rho = xv * xv + yv * yv
    fy = xv / rho
    fx = -yv / rho
    v = T.atan2(yv, xv)
    dy = y.d if isinstance(y, Jet) else None
    dx = x.d if isinstance(x, Jet) else None
    d = _add(None if dy is None else fy * dy, None if dx is None else fx * dx)
    dd = None
    if ref.pairs is not None:
        I, J = ref.pairs.I, ref.pairs.J  # noqa: E741
        rho2 = rho * rho
        fyy = -2.0 * xv * yv / rho2
        fxx = 2.0 * xv * yv / rho2
        fxy = (yv * yv - xv * xv) / rho2
        terms = []
        if isinstance(y, Jet):
            if y.dd is not None:
                terms.append(fy * y.dd)
            terms.append(fyy * (T.take(dy, I, 0) * T.take(dy, J, 0)))
        if isinstance(x, Jet):
            if x.dd is not None:
                terms.append(fx * x.dd)
            terms.append(fxx * (T.take(dx, I, 0) * T.take(dx, J, 0)))
        if dy is not None and dx is not None:
            terms.append(fxy * (T.take(dy, I, 0) * T.take(dx, J, 0) + T.take(dx, I, 0) * T.take(dy, J, 0)))
        for t in terms:
            dd = _add(dd, t)
    return Jet(v, d, dd, ref.pairs)


def linear(x, W, b=None, rowwise=False):
    if isinstance(x, Jet):
        return Jet(
            T.linear(x.v, W, b, rowwise=rowwise),
            T.linear(x.d, W, None, rowwise=rowwise),
            None if x.dd is None else T.linear(x.dd, W, None, rowwise=rowwise),
            x.pairs,
        )
    return T.linear(x, W, b, rowwise=rowwise)


def stack(items: Sequence, axis=-1):
    """Stack along a negative axis; non-jet items are constants."""
    assert axis < 0
    ref = next((x for x in items if isinstance(x, Jet)), None)
    if ref is None:
        return T.stack(items, axis=axis)
    k = ref.pairs.k if ref.pairs is not None else T.value(ref.d).shape[0]
    shape = np.broadcast_shapes(*[_shape(value(x)) for x in items])
    vs, ds, dds = [], [], []
    for x in items:
        if isinstance(x, Jet):
            vs.append(x.v)
            ds.append(x.d)
            dds.append(x.dd)
        else:
            c = np.broadcast_to(np.asarray(x, dtype=float), shape)
            vs.append(c)
            ds.append(np.zeros((k,) + shape))
            dds.append(None)
    dd = None
    if ref.pairs is not None:
        P = ref.pairs.count
        dd = T.stack([np.zeros((P,) + shape) if q is None else q for q in dds], axis=axis)
    return Jet(T.stack(vs, axis=axis), T.stack(ds, axis=axis), dd, ref.pairs)


def concatenate(items: Sequence, axis=-1):
    assert axis < 0
    ref = next((x for x in items if isinstance(x, Jet)), None)
    if ref is None:
        return T.concatenate(items, axis=axis)
    k = T.value(ref.d).shape[0]
    vs, ds, dds = [], [], []
    for x in items:
        if isinstance(x, Jet):
            vs.append(x.v)
            ds.append(x.d)
            dds.append(x.dd)
        else:
            c = np.asarray(x, dtype=float)
            lead = _shape(ref.v)[: ref.ndim - c.ndim]
            c = np.broadcast_to(c, lead + c.shape) if c.ndim < ref.ndim else c
            vs.append(c)
            ds.append(np.zeros((k,) + c.shape))
            dds.append(None)
    dd = None
    if ref.pairs is not None:
        P = ref.pairs.count
        dd = T.concatenate(
            [np.zeros((P,) + _shape(v)) if q is None else q for v, q in zip(vs, dds)], axis=axis
        )
    return Jet(T.concatenate(vs, axis=axis), T.concatenate(ds, axis=axis), dd, ref.pairs)


def sum_(x, axis=None):
    if isinstance(x, Jet):
        return x.sum(axis)
    return T.sum_(x, axis=axis)


def take(x, idx, axis=-1):
    if isinstance(x, Jet):
        return x.take(idx, axis)
    return T.take(x, idx, axis)
