"""Greedy non-negative cubature over potential terms, fit to reduced gradients."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import nnls

from .energy import Potential
from .errors import FormatError, NumericError
from .network import SubspaceModel, decode_jet
from .reduced import ReducedPotential

log = logging.getLogger(__name__)

CUBATURE_FORMAT = "lipsub-cubature/1"


@dataclass
class CubatureSet:
    element_ids: np.ndarray
    weights: np.ndarray
    fit_error: float = float("nan")
    residual_history: list = field(default_factory=list)
    source_sha256: Optional[str] = None

    def __post_init__(self):
        ids = np.asarray(self.element_ids, dtype=np.int64).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if ids.shape != w.shape:
            raise ValueError("element_ids and weights differ in length")
        if np.any(w < 0):
            raise ValueError("cubature weights must be non-negative")
        order = np.argsort(ids, kind="stable")
        ids, w = ids[order], w[order]
        if ids.size > 1 and np.any(np.diff(ids) == 0):
            raise ValueError("cubature element ids must be unique")
        self.element_ids, self.weights = ids, w

    @property
    def size(self) -> int:
        return int(self.element_ids.size)

    @classmethod
    def full(cls, n_terms: int) -> "CubatureSet":
        return cls(np.arange(n_terms), np.ones(n_terms), 0.0)

    def to_dict(self) -> dict:
        return {
            "format": CUBATURE_FORMAT,
            "element_ids": [int(i) for i in self.element_ids],
            "weights": [float(w) for w in self.weights],
            "fit_error": float(self.fit_error),
            "residual_history": [float(r) for r in self.residual_history],
            "source_sha256": self.source_sha256,
        }


def save_cubature(cub: CubatureSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(cub.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_cubature(path) -> CubatureSet:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid cubature JSON: {exc}", path, exc.lineno) from None
    if d.get("format") != CUBATURE_FORMAT:
        raise FormatError(f"unsupported cubature format {d.get('format')!r}", path)
    return CubatureSet(d["element_ids"], d["weights"], d.get("fit_error", float("nan")),
                       d.get("residual_history", []), d.get("source_sha256"))


# ---------------------------------------------------------------------------


def per_term_reduced_gradients(model: SubspaceModel, potential: Potential, z) -> np.ndarray:
    """``(r, n_terms)`` matrix whose column e is ``J(z)^T dP_e/dq``."""
    j = decode_jet(model, np.asarray(z, dtype=float), order=1)
    q = np.asarray(j.v)
    J = np.asarray(j.d).T
    Jpad = np.vstack([J, np.zeros((1, J.shape[1]))])
    cols = np.zeros((model.r, potential.n_terms))
    for grp, _ in potential.term_groups(q, want_hessian=False):
        Jl = Jpad[grp.dofs]  # -1 picks the zero row
        red = np.einsum("mn,mnr->mr", grp.derivs.gradient, Jl)
        cols[:, grp.ids] = red.T
    return cols


def build_training_matrix(model: SubspaceModel, potential: Potential, z_samples):
    """Stack per-sample normalised per-term reduced gradients.

    Returns ``(A, b)`` with ``b = A @ 1``: the normalised full reduced gradient.
    Samples whose full reduced gradient norm is below ``1e-12`` are skipped.
    """
    blocks = []
    for i, z in enumerate(np.atleast_2d(z_samples)):
        cols = per_term_reduced_gradients(model, potential, z)
        nrm = float(np.linalg.norm(cols.sum(axis=1)))
        if not np.isfinite(nrm):
            raise NumericError(f"non-finite reduced gradient for cubature sample {i}")
        if nrm < 1e-12:
            log.warning("cubature sample %d skipped: reduced gradient norm %.3e", i, nrm)
            continue
        blocks.append(cols / nrm)
    if not blocks:
        return np.zeros((0, potential.n_terms)), np.zeros(0)
    A = np.vstack(blocks)
    return A, A @ np.ones(A.shape[1])


def select_cubatures(A, b, target_S: Optional[int] = None, target_error: Optional[float] = None) -> CubatureSet:
    """Greedy selection with an NNLS re-fit over the active set after every pick."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise NumericError("cubature training matrix is not finite")
    if target_S is None and target_error is None:
        raise ValueError("give target_S or target_error")
    n_cols = A.shape[1]
    limit = n_cols if target_S is None else min(int(target_S), n_cols)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return CubatureSet([], [], 0.0, [0.0])
    col_norm = np.linalg.norm(A, axis=0)
    active: list = []
    w = np.zeros(0)
    res = b.copy()
    rel = 1.0
    history = [rel]
    while len(active) < limit and (target_error is None or rel > target_error):
        score = (A.T @ res) / np.where(col_norm > 0, col_norm, np.inf)
        score[active] = -np.inf
        pick = int(np.argmax(score))
        if not score[pick] > 0:
            break
        trial = active + [pick]
        try:
            w_new, _ = nnls(A[:, trial], b, maxiter=50 * len(trial) + 100)
        except RuntimeError as exc:
            log.warning("NNLS failed after %d elements (%s); keeping current set", len(active), exc)
            break
        res_new = b - A[:, trial] @ w_new
        rel_new = float(np.linalg.norm(res_new)) / bnorm
        if rel_new > rel:
            # NNLS can return a marginally worse point; the previous weights
            # padded with zero stay feasible and keep the residual monotone
            w_new = np.append(w, 0.0)
            res_new, rel_new = res, rel
        active, w, res, rel = trial, w_new, res_new, rel_new
        history.append(rel)
    keep = w > 0
    ids = np.asarray(active, dtype=np.int64)[keep] if active else np.zeros(0, dtype=np.int64)
    return CubatureSet(ids, w[keep] if active else np.zeros(0), rel, history)


def cubature_error(cub: CubatureSet, model: SubspaceModel, potential: Potential, z_heldout) -> dict:
    """Mean relative errors of gradient, Hessian and per-pair order-2 Lipschitz terms."""
    z = np.atleast_2d(np.asarray(z_heldout, dtype=float))
    full = ReducedPotential(potential, None).derivatives(model, z, 2)
    if cub.size:
        approx = ReducedPotential(potential, cub).derivatives(model, z, 2)
        gc, hc = approx.gradient, approx.hessian
    else:
        gc, hc = np.zeros_like(full.gradient), np.zeros_like(full.hessian)

    def rel(a, b, axes):
        num = np.sqrt(np.sum((a - b) ** 2, axis=axes))
        den = np.sqrt(np.sum(b**2, axis=axes))
        return float(np.mean(num / den))

    npair = z.shape[0] // 2
    dz2 = np.sum((z[0:2 * npair:2] - z[1:2 * npair:2]) ** 2, axis=1)
    ok = dz2 > 0  # coincident pairs carry no Lipschitz information

    def terms(h):
        return (np.sum((h[0:2 * npair:2] - h[1:2 * npair:2]) ** 2, axis=(1, 2)) / np.where(ok, dz2, 1.0))[ok]

    tf, tc = terms(full.hessian), terms(hc)
    npair = int(ok.sum())
    return {
        "gradient": rel(gc, full.gradient, 1),
        "hessian": rel(hc, full.hessian, (1, 2)),
        "lipschitz": float(np.mean(np.abs(tc - tf) / tf)) if npair else float("nan"),
    }


def fit_cubature(model: SubspaceModel, potential: Potential, z_samples, target_S: int,
                 source_sha256: Optional[str] = None) -> CubatureSet:
    A, b = build_training_matrix(model, potential, z_samples)
    cub = select_cubatures(A, b, target_S=target_S)
    cub.source_sha256 = source_sha256
    return cub
