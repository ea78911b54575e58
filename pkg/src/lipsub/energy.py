"""Elastic potential: per-term energies, derivatives and global assembly.

The potential is a sum over *terms*. Term ids are laid out as

* ``[0, E)`` simplex elements (stable neo-Hookean),
* ``[E, E + H)`` bending hinges (shell meshes only),
* ``[E + H, E + H + C)`` penalty contact, one term per free vertex, present
  only when signed-distance obstacles are configured.

A cubature subset selects term ids with non-negative weights. Every energy is
written once in terms of generic arithmetic so the same code evaluates plain
values, forward jets (reduced gradients and Hessians) and taped jets (their
parameter gradients). Volumetric elements additionally have a closed-form
gradient and Hessian used by the full-space solver.

Material model (see MATERIALS.md)::

    psi(F) = mu/2 (|F|^2 - d) - mu (J - 1) + lam/2 (J - 1)^2,   J = det F
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import jet as jt
from . import tape as T
from .errors import NumericError
from .jet import Jet, Pairs
from .mesh import MaterialParams, Mesh, dof_unpack


@dataclass
class ElementDerivatives:
    energy: np.ndarray
    gradient: np.ndarray
    hessian: Optional[np.ndarray] = None


@dataclass
class AssembledPotential:
    value: float
    gradient: np.ndarray
    hessian: Optional[sp.csr_matrix] = None


# ---------------------------------------------------------------------------
# signed distance primitives


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def value(self, x):
        c = np.asarray(self.center, dtype=float)
        return np.linalg.norm(x - c, axis=-1) - self.radius

    def derivatives(self, x):
        c = np.asarray(self.center, dtype=float)
        r = x - c
        dist = np.linalg.norm(r, axis=-1)
        n = r / dist[..., None]
        eye = np.eye(x.shape[-1])
        hess = (eye - n[..., :, None] * n[..., None, :]) / dist[..., None, None]
        return dist - self.radius, n, hess

    def generic(self, X):
        """``X`` is a list of coordinate components."""
        sq = None
        for a, xa in enumerate(X):
            t = xa - float(self.center[a])
            sq = t * t if sq is None else sq + t * t
        return jt.sqrt(sq) - self.radius

    def to_dict(self):
        return {"type": "sphere", "center": list(map(float, self.center)), "radius": float(self.radius)}


@dataclass(frozen=True)
class HalfSpace:
    normal: tuple
    offset: float

    def _n(self):
        n = np.asarray(self.normal, dtype=float)
        return n / np.linalg.norm(n)

    def value(self, x):
        return x @ self._n() - self.offset

    def derivatives(self, x):
        n = self._n()
        phi = x @ n - self.offset
        grad = np.broadcast_to(n, x.shape).copy()
        return phi, grad, np.zeros(x.shape + (x.shape[-1],))

    def generic(self, X):
        n = self._n()
        out = None
        for a, xa in enumerate(X):
            t = xa * float(n[a])
            out = t if out is None else out + t
        return out - self.offset

    def to_dict(self):
        return {"type": "halfspace", "normal": list(map(float, self.normal)), "offset": float(self.offset)}


def sdf_from_dict(d: dict):
    kind = d.get("type")
    if kind == "sphere":
        return Sphere(tuple(float(c) for c in d["center"]), float(d["radius"]))
    if kind in ("halfspace", "half-space", "plane"):
        return HalfSpace(tuple(float(c) for c in d["normal"]), float(d.get("offset", 0.0)))
    raise ValueError(f"unknown SDF type {kind!r}")


# ---------------------------------------------------------------------------
# generic energy densities (components as nested lists)


def _det(F):
    if len(F) == 2:
        return F[0][0] * F[1][1] - F[0][1] * F[1][0]
    return (
        F[0][0] * (F[1][1] * F[2][2] - F[1][2] * F[2][1])
        - F[0][1] * (F[1][0] * F[2][2] - F[1][2] * F[2][0])
        + F[0][2] * (F[1][0] * F[2][1] - F[1][1] * F[2][0])
    )


def _cross(a, b):
    return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]


def _dot(a, b):
    out = a[0] * b[0]
    for i in range(1, len(a)):
        out = out + a[i] * b[i]
    return out


def snh_density_generic(F, mu: float, lam: float):
    """Energy density from deformation-gradient components ``F[a][b]``.

    Square ``F`` gives the volumetric model; a 3x2 ``F`` (shell membrane) uses
    the area ratio ``|f0 x f1|`` in place of ``det F``.
    """
    rows, cols = len(F), len(F[0])
    ic = None
    for a in range(rows):
        for b in range(cols):
            t = F[a][b] * F[a][b]
            ic = t if ic is None else ic + t
    if rows == cols:
        J = _det(F)
    else:
        c = _cross([F[a][0] for a in range(3)], [F[a][1] for a in range(3)])
        J = jt.sqrt(_dot(c, c))
    Jm1 = J - 1.0
    return 0.5 * mu * (ic - cols) - mu * Jm1 + 0.5 * lam * (Jm1 * Jm1)


def _deformation_components(X, G):
    """``F[a][b] = sum_j X[j][a] * G[:, j, b]`` for corner components ``X[j][a]``."""
    nv, m = G.shape[1], G.shape[2]
    dim = len(X[0])
    F = []
    for a in range(dim):
        row = []
        for b in range(m):
            acc = None
            for j in range(nv):
                t = X[j][a] * G[:, j, b]
                acc = t if acc is None else acc + t
            row.append(acc)
        F.append(row)
    return F


def hinge_energy_generic(X, rest_angle, weight, stiffness: float):
    x0, x1, xa, xb = X
    e = [x1[i] - x0[i] for i in range(3)]
    n1 = _cross(e, [xa[i] - x0[i] for i in range(3)])
    n2 = _cross([xb[i] - x0[i] for i in range(3)], e)
    elen = jt.sqrt(_dot(e, e))
    s = _dot(_cross(n1, n2), e) / elen
    c = _dot(n1, n2)
    dtheta = jt.atan2(s, c) - rest_angle
    return (stiffness * weight) * (dtheta * dtheta)


def contact_energy_generic(X, sdfs, stiffness: float, margin: float):
    out = None
    for sdf in sdfs:
        gap = jt.relu(margin - sdf.generic(X))
        t = stiffness * (gap * gap * gap)
        out = t if out is None else out + t
    return out


# ---------------------------------------------------------------------------
# closed-form volumetric SNH

_EPS3 = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    _EPS3[_i, _j, _k] = 1.0
    _EPS3[_i, _k, _j] = -1.0

_D2J_2D = np.zeros((2, 2, 2, 2))
_D2J_2D[0, 0, 1, 1] = _D2J_2D[1, 1, 0, 0] = 1.0
_D2J_2D[0, 1, 1, 0] = _D2J_2D[1, 0, 0, 1] = -1.0


def snh_stress(F, mu: float, lam: float, want_tangent: bool = False):
    """Energy density, first Piola-Kirchhoff stress and optionally ``d2psi/dF2``.

    ``F`` has shape ``(..., d, d)``. The tangent has shape ``(..., d, d, d, d)``
    indexed ``[a, b, c, e] = d2psi / dF_ab dF_ce``.
    """
    d = F.shape[-1]
    if d == 2:
        J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
        cof = np.empty_like(F)
        cof[..., 0, 0] = F[..., 1, 1]
        cof[..., 0, 1] = -F[..., 1, 0]
        cof[..., 1, 0] = -F[..., 0, 1]
        cof[..., 1, 1] = F[..., 0, 0]
    else:
        J = np.linalg.det(F)
        cof = 0.5 * np.einsum("acm,ben,...ce,...mn->...ab", _EPS3, _EPS3, F, F)
    Jm1 = J - 1.0
    psi = 0.5 * mu * (np.sum(F * F, axis=(-2, -1)) - d) - mu * Jm1 + 0.5 * lam * Jm1 * Jm1
    coef = lam * Jm1 - mu
    P = mu * F + coef[..., None, None] * cof
    if not want_tangent:
        return psi, P, None
    eye = np.eye(d)
    A = mu * np.einsum("ac,be->abce", eye, eye) + lam * cof[..., :, :, None, None] * cof[..., None, None, :, :]
    if d == 2:
        d2J = _D2J_2D
    else:
        d2J = np.einsum("acm,ben,...mn->...abce", _EPS3, _EPS3, F)
    A = A + coef[..., None, None, None, None] * d2J
    return psi, P, A


def project_spd(hessian: np.ndarray) -> np.ndarray:
    """Clamp the eigenvalues of symmetric blocks ``(..., N, N)`` from below.

    The floor is ``1e-10`` times the block's largest eigenvalue magnitude.
    Blocks that already satisfy the floor are returned unchanged.
    """
    H = np.asarray(hessian, dtype=float)
    if H.shape[-1] == 0:
        return H.copy()
    single = H.ndim == 2
    Hb = H[None] if single else H
    try:
        lam, vec = np.linalg.eigh(Hb)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from None
    if not np.all(np.isfinite(lam)):
        raise NumericError("eigendecomposition produced non-finite eigenvalues")
    floor = 1e-10 * np.max(np.abs(lam), axis=-1, keepdims=True)
    out = Hb.copy()
    bad = np.any(lam < floor, axis=-1)
    if np.any(bad):
        lc = np.maximum(lam[bad], floor[bad])
        vb = vec[bad]
        rec = np.einsum("mij,mj,mkj->mik", vb, lc, vb)
        out[bad] = 0.5 * (rec + np.swapaxes(rec, -1, -2))
    return out[0] if single else out


# ---------------------------------------------------------------------------


def _local_jets(x_loc: np.ndarray):
    """Seed a jet over every local coordinate of ``(m, nv, dim)`` corner positions."""
    m, nv, dim = x_loc.shape
    N = nv * dim
    pairs = Pairs.upper(N)
    X = []
    for j in range(nv):
        row = []
        for a in range(dim):
            d = np.zeros((N, m))
            d[j * dim + a] = 1.0
            row.append(Jet(x_loc[:, j, a], d, None, pairs))
        X.append(row)
    return X


def _jet_to_derivs(e: Jet, want_hessian: bool):
    grad = np.moveaxis(np.asarray(e.d), 0, -1)
    hess = e.hessian() if want_hessian else None
    return ElementDerivatives(np.asarray(e.v), grad, hess)


@dataclass
class TermGroup:
    """Derivatives of one kind of term for a set of term ids."""

    ids: np.ndarray
    dofs: np.ndarray  # (m, N) free-DOF index, -1 for pinned coordinates
    derivs: ElementDerivatives


@dataclass(frozen=True)
class Layout:
    """Vertices and free DOFs touched by a term subset, plus per-term local maps."""

    vertices: np.ndarray
    rows: np.ndarray
    vertex_rows: np.ndarray  # (|U|, dim) index into concat(rows-values, pinned-values)
    n_rows: int


class Potential:
    """Elastic potential of a mesh with fixed pins and optional obstacles."""

    def __init__(self, mesh: Mesh, mat: MaterialParams, sdfs: Sequence = (), pin_values=None):
        self.mesh = mesh
        self.mat = mat
        self.sdfs = tuple(sdfs)
        self.pin_values = (
            np.array(mesh.vertices[mesh.pinned], dtype=float)
            if pin_values is None
            else np.asarray(pin_values, dtype=float).reshape(mesh.pinned.size, mesh.dim)
        )
        self.n_elements = mesh.n_elements
        self.n_hinges = int(mesh.hinges.shape[0]) if mat.bend_stiffness > 0 else 0
        self.has_contact = bool(self.sdfs) and mat.contact_stiffness > 0
        self.n_contact = int(mesh.free.size) if self.has_contact else 0
        self.n_terms = self.n_elements + self.n_hinges + self.n_contact
        k = mesh.simplex_dim
        R = mesh.rest_inverse
        G = np.empty((mesh.n_elements, k + 1, k))
        G[:, 1:, :] = R
        G[:, 0, :] = -R.sum(axis=1)
        self.G = G
        self._elem_dofs = mesh.dof_index[mesh.elements].reshape(mesh.n_elements, -1)
        self._hinge_dofs = mesh.dof_index[mesh.hinges].reshape(mesh.hinges.shape[0], 4 * mesh.dim)
        self._contact_dofs = mesh.dof_index[mesh.free]

    def with_pins(self, pin_values) -> "Potential":
        return Potential(self.mesh, self.mat, self.sdfs, pin_values)

    # -- helpers ------------------------------------------------------------

    def positions(self, q) -> np.ndarray:
        return dof_unpack(self.mesh, q, self.pin_values)

    def _split(self, subset):
        if subset is None:
            ids = np.arange(self.n_terms)
            w = np.ones(self.n_terms)
        else:
            ids = np.asarray(subset.element_ids, dtype=np.int64)
            w = np.asarray(subset.weights, dtype=float)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_terms):
            raise ValueError("subset references a term outside the potential")
        E, H = self.n_elements, self.n_hinges
        m_el = ids < E
        m_hi = (ids >= E) & (ids < E + H)
        m_co = ids >= E + H
        return (
            (ids[m_el], w[m_el]),
            (ids[m_hi] - E, w[m_hi]),
            (ids[m_co] - E - H, w[m_co]),
        )

    def _check_hinges(self, x, hinge_ids):
        if hinge_ids.size == 0:
            return
        h = self.mesh.hinges[hinge_ids]
        x0, x1, xa, xb = (x[h[:, i]] for i in range(4))
        e = x1 - x0
        a1 = np.linalg.norm(np.cross(e, xa - x0), axis=1)
        a2 = np.linalg.norm(np.cross(xb - x0, e), axis=1)
        scale = np.einsum("ij,ij->i", e, e)
        bad = np.flatnonzero(~((a1 > 1e-14 * scale) & (a2 > 1e-14 * scale)))
        if bad.size:
            raise NumericError(f"hinge {int(hinge_ids[bad[0]])} has a degenerate adjacent triangle")

    # -- per-term derivatives (full space) ----------------------------------

    def element_derivatives(self, x, ids, want_hessian=True) -> ElementDerivatives:
        mesh = self.mesh
        ids = np.asarray(ids, dtype=np.int64)
        x_loc = x[mesh.elements[ids]]  # (m, k+1, dim)
        G = self.G[ids]
        V = mesh.rest_measure[ids]
        if not mesh.is_shell:
            F = np.einsum("mja,mjb->mab", x_loc, G)
            psi, P, A = snh_stress(F, self.mat.mu, self.mat.lam, want_hessian)
            grad = np.einsum("mjb,mab->mja", G, P) * V[:, None, None]
            grad = grad.reshape(len(ids), -1)
            hess = None
            if want_hessian:
                H = np.einsum("mjb,mle,mabce->mjalc", G, G, A) * V[:, None, None, None, None]
                n_loc = grad.shape[1]
                hess = H.reshape(len(ids), n_loc, n_loc)
            return ElementDerivatives(psi * V, grad, hess)
        X = _local_jets(x_loc)
        F = _deformation_components(X, G)
        e = snh_density_generic(F, self.mat.mu, self.mat.lam) * V
        return _jet_to_derivs(e, want_hessian)

    def hinge_derivatives(self, x, ids, want_hessian=True) -> ElementDerivatives:
        ids = np.asarray(ids, dtype=np.int64)
        self._check_hinges(x, ids)
        x_loc = x[self.mesh.hinges[ids]]
        X = _local_jets(x_loc)
        e = hinge_energy_generic(
            X, self.mesh.hinge_rest_angle[ids], self.mesh.hinge_weight[ids], self.mat.bend_stiffness
        )
        return _jet_to_derivs(e, want_hessian)

    def contact_derivatives(self, x, ids, want_hessian=True) -> ElementDerivatives:
        ids = np.asarray(ids, dtype=np.int64)
        xv = x[self.mesh.free[ids]]
        dim = xv.shape[1]
        k, m = self.mat.contact_stiffness, self.mat.contact_margin
        energy = np.zeros(len(ids))
        grad = np.zeros((len(ids), dim))
        hess = np.zeros((len(ids), dim, dim)) if want_hessian else None
        for sdf in self.sdfs:
            phi, n, h = sdf.derivatives(xv)
            s = np.maximum(m - phi, 0.0)
            energy += k * s**3
            grad += (-3.0 * k * s * s)[:, None] * n
            if want_hessian:
                hess += (6.0 * k * s)[:, None, None] * n[:, :, None] * n[:, None, :]
                hess -= (3.0 * k * s * s)[:, None, None] * h
        return ElementDerivatives(energy, grad, hess)

    def term_groups(self, q, want_hessian=False, subset=None):
        """Weighted-independent local derivatives for every term of ``subset``.

        Returns ``[(TermGroup, weights), ...]`` in the order elements, hinges,
        contact.
        """
        x = self.positions(q)
        (el, wel), (hi, whi), (co, wco) = self._split(subset)
        out = []
        if el.size:
            out.append((TermGroup(el, self._elem_dofs[el], self.element_derivatives(x, el, want_hessian)), wel))
        if hi.size:
            out.append(
                (TermGroup(hi + self.n_elements, self._hinge_dofs[hi],
                           self.hinge_derivatives(x, hi, want_hessian)), whi)
            )
        if co.size:
            out.append(
                (
                    TermGroup(co + self.n_elements + self.n_hinges, self._contact_dofs[co],
                              self.contact_derivatives(x, co, want_hessian)),
                    wco,
                )
            )
        return out

    def assemble(self, q, want_hessian=False, subset=None, project=False) -> AssembledPotential:
        """Weighted sum of term energies, gradients and (sparse) Hessians.

        ``project`` clamps every local Hessian block to be positive
        semi-definite before scattering.
        """
        n = self.mesh.n_dofs
        groups = self.term_groups(q, want_hessian, subset)
        energies, idx, vals = [], [], []
        rows, cols, hv = [], [], []
        for grp, w in groups:
            dv = grp.derivs
            energies.append(w * dv.energy)
            dofs = grp.dofs
            valid = dofs >= 0
            idx.append(dofs[valid])
            vals.append((w[:, None] * dv.gradient)[valid])
            if want_hessian:
                Hl = project_spd(dv.hessian) if project else dv.hessian
                Hl = w[:, None, None] * Hl
                pair_valid = valid[:, :, None] & valid[:, None, :]
                rr = np.broadcast_to(dofs[:, :, None], Hl.shape)
                cc = np.broadcast_to(dofs[:, None, :], Hl.shape)
                rows.append(rr[pair_valid])
                cols.append(cc[pair_valid])
                hv.append(Hl[pair_valid])
        value = math.fsum(np.concatenate(energies).tolist()) if energies else 0.0
        if idx:
            grad = np.bincount(np.concatenate(idx), weights=np.concatenate(vals), minlength=n)
        else:
            grad = np.zeros(n)
        hess = None
        if want_hessian:
            if rows:
                hess = sp.coo_matrix(
                    (np.concatenate(hv), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
                ).tocsr()
            else:
                hess = sp.csr_matrix((n, n))
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NumericError("non-finite potential or gradient during assembly")
        return AssembledPotential(value, grad, hess)

    # -- generic evaluation for reduced quantities ---------------------------

    def layout(self, subset=None) -> Layout:
        """Touched vertices and free DOFs of a term subset."""
        mesh = self.mesh
        (el, _), (hi, _), (co, _) = self._split(subset)
        verts = np.unique(
            np.concatenate([mesh.elements[el].ravel(), mesh.hinges[hi].ravel(), mesh.free[co]]).astype(np.int64)
        )
        dof = mesh.dof_index[verts]  # (U, dim)
        rows = np.sort(dof[dof >= 0])
        pos = np.searchsorted(rows, np.where(dof >= 0, dof, 0))
        pin_slot = np.searchsorted(mesh.pinned, verts)
        vertex_rows = np.where(dof >= 0, pos, rows.size + pin_slot[:, None] * mesh.dim + np.arange(mesh.dim))
        return Layout(verts, rows, vertex_rows.astype(np.int64), int(rows.size))

    def energy_generic(self, free_rows, layout: Layout, subset=None):
        """Weighted potential from the values of the touched free DOFs.

        ``free_rows`` holds the touched DOFs (``layout.rows``) along its last
        axis and may be an array, a tape ``Var`` or a ``Jet``. Returns an object
        of the same kind with the last axis summed away.
        """
        mesh = self.mesh
        dim = mesh.dim
        (el, wel), (hi, whi), (co, wco) = self._split(subset)
        lead = np.shape(T.value(jt.value(free_rows)))[:-1]
        pins = np.broadcast_to(self.pin_values.ravel(), lead + (self.pin_values.size,))
        flat = jt.concatenate([free_rows, pins], axis=-1)
        total = None

        def coord(vertex_ids, a):
            loc = np.searchsorted(layout.vertices, vertex_ids)
            return jt.take(flat, layout.vertex_rows[loc, a], axis=-1)

        if el.size:
            nv = mesh.elements.shape[1]
            X = [[coord(mesh.elements[el, j], a) for a in range(dim)] for j in range(nv)]
            F = _deformation_components(X, self.G[el])
            psi = snh_density_generic(F, self.mat.mu, self.mat.lam)
            total = (psi * (wel * mesh.rest_measure[el])).sum(axis=-1)
        if hi.size:
            X =[[coord(mesh.hinges[hi, j], a) for a in range(3)] for j in range(4)]
            eh = hinge_energy_generic(X, mesh.hinge_rest_angle[hi], mesh.hinge_weight[hi], self.mat.bend_stiffness)
            t = (eh * whi).sum(axis=-1)
            total = t if total is None else total + t
        if co.size:
            X = [coord(mesh.free[co], a) for a in range(dim)]
            ec = contact_energy_generic(X, self.sdfs, self.mat.contact_stiffness, self.mat.contact_margin)
            t = (ec * wco).sum(axis=-1)
            total = t if total is None else total + t
        if total is None:
            total = 0.0 * jt.sum_(free_rows, axis=-1) if layout.n_rows else np.zeros(np.shape(jt.value(free_rows))[:-1])
        return total


def assemble(mesh: Mesh, mat: MaterialParams, q, want_hessian=False, subset=None, sdfs=(), pin_values=None,
             project=False) -> AssembledPotential:
    return Potential(mesh, mat, sdfs, pin_values).assemble(q, want_hessian, subset, project)


def element_snh(mesh: Mesh, mat: MaterialParams, element_id: int, q, pin_values=None) -> ElementDerivatives:
    pot = Potential(mesh, mat, (), pin_values)
    d = pot.element_derivatives(pot.positions(q), [element_id], True)
    return ElementDerivatives(float(d.energy[0]), d.gradient[0], d.hessian[0])


def element_bending(mesh: Mesh, mat: MaterialParams, hinge_id: int, q, pin_values=None) -> ElementDerivatives:
    pot = Potential(mesh, mat, (), pin_values)
    d = pot.hinge_derivatives(pot.positions(q), [hinge_id], True)
    return ElementDerivatives(float(d.energy[0]), d.gradient[0], d.hessian[0])


def contact_penalty(mesh: Mesh, mat: MaterialParams, sdfs, q, pin_values=None) -> ElementDerivatives:
    """Per free vertex contact energy, gradient ``(Vf, dim)`` and Hessian ``(Vf, dim, dim)``."""
    if not isinstance(sdfs, (list, tuple)):
        sdfs = (sdfs,)
    pot = Potential(mesh, mat, sdfs, pin_values)
    return pot.contact_derivatives(pot.positions(q), np.arange(mesh.free.size), True)
