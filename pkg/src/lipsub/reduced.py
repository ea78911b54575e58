"""Reduced elastic quantities ``P~(z) = sum_e w_e P_e(f(z))`` and their z-derivatives.

The decoder is evaluated only on the free DOFs touched by the term subset and
pushed through the generic energy as a forward jet. The jet's first and second
derivative slots are then the reduced gradient and the full reduced Hessian
(``J^T H J`` plus the gradient-weighted decoder curvature).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tape as T
from .energy import Potential
from .jet import Pairs, pair_matrix_index
from .network import SubspaceModel, decode_generic, decode_jet


@dataclass
class ReducedDerivatives:
    value: np.ndarray
    gradient: Optional[np.ndarray] = None  # (B, r)
    hessian: Optional[np.ndarray] = None  # (B, r, r)


class ReducedPotential:
    """Reduced potential restricted to a term subset (``None`` = every term)."""

    def __init__(self, potential: Potential, subset=None):
        self.potential = potential
        self.subset = subset
        self.layout = potential.layout(subset)

    def generic(self, model: SubspaceModel, z, order: int):
        """Value (order 0) or jet (orders 1, 2) of ``P~`` for a ``(B, r)`` batch.

        ``model`` may carry tape variables, in which case the result (and the
        derivative slots of the jet) are recorded.
        """
        rows = self.layout.rows
        if order == 0:
            x = decode_generic(model, z, rows)
        else:
            x = decode_jet(model, z, order=order, rows=rows)
        return self.potential.energy_generic(x, self.layout, self.subset)

    def derivatives(self, model: SubspaceModel, z, order: int = 2) -> ReducedDerivatives:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = self.generic(model, z, order)
        if order == 0:
            return ReducedDerivatives(np.asarray(T.value(out)))
        grad = np.moveaxis(np.asarray(T.value(out.d)), 0, -1)
        hess = None
        if order >= 2:
            dd = np.asarray(T.value(out.dd))
            idx = pair_matrix_index(model.r, Pairs.upper(model.r))
            hess = np.moveaxis(dd, 0, -1)[..., idx]
        return ReducedDerivatives(np.asarray(T.value(out.v)), grad, hess)


def derivative_slot(out, order: int):
    """The ``D^o P~`` tensor in a flattened layout with per-entry norm weights.

    Returns ``(tensor, weights)`` where ``tensor`` has the batch on its last
    axis and ``sum(weights * tensor**2)`` over the leading axis equals the
    squared Frobenius norm. For order 2 only the upper-triangle pairs are
    stored, so off-diagonal entries are weighted twice.
    """
    if order == 0:
        return out, None
    if order == 1:
        return out.d, None
    pairs = out.pairs
    w = np.where(pairs.I == pairs.J, 1.0, 2.0)
    return out.dd, w
