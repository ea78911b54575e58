"""Simplicial meshes, rest-state precomputation, lumped mass and DOF packing.

The free DOF vector ``q`` stacks the coordinates of every non-pinned vertex in
increasing vertex order, coordinates interleaved (``x0, y0, x1, y1, ...``).
Pinned vertices never appear in ``q``; their positions are supplied separately
through ``pin_values`` when a full position array is rebuilt.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import FormatError, GeometryError


@dataclass(frozen=True)
class MaterialParams:
    mu: float
    lam: float
    density: float
    bend_stiffness: float = 0.0
    contact_stiffness: float = 1e5
    contact_margin: float = 1e-3

    def __post_init__(self):
        # mu == 0 is accepted so that inertia-only problems can be posed
        if self.mu < 0 or self.lam < 0:
            raise ValueError("Lame coefficients must be non-negative")
        if not self.density > 0:
            raise ValueError("density must be positive")
        if self.bend_stiffness < 0 or self.contact_stiffness < 0:
            raise ValueError("stiffnesses must be non-negative")
        if self.contact_margin < 0:
            raise ValueError("contact_margin must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "MaterialParams":
        return cls(
            mu=float(d["mu"]),
            lam=float(d.get("lambda", d.get("lam", 0.0))),
            density=float(d["density"]),
            bend_stiffness=float(d.get("bend_stiffness", 0.0)),
            contact_stiffness=float(d.get("contact_stiffness", 1e5)),
            contact_margin=float(d.get("contact_margin", 1e-3)),
        )

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "lambda": self.lam,
            "density": self.density,
            "bend_stiffness": self.bend_stiffness,
            "contact_stiffness": self.contact_stiffness,
            "contact_margin": self.contact_margin,
        }


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable simplicial mesh.

    ``dim`` is the ambient dimension. Elements are triangles when
    ``simplex_dim == 2`` (planar 2D solids, or cloth shells embedded in 3D)
    and tetrahedra when ``simplex_dim == 3``.
    """

    vertices: np.ndarray
    elements: np.ndarray
    pinned: np.ndarray
    rest_inverse: np.ndarray
    rest_measure: np.ndarray
    hinges: np.ndarray
    hinge_rest_angle: np.ndarray
    hinge_weight: np.ndarray
    free: np.ndarray = field(repr=False)
    dof_index: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return int(self.vertices.shape[1])

    @property
    def simplex_dim(self) -> int:
        return int(self.elements.shape[1]) - 1

    @property
    def is_shell(self) -> bool:
        return self.simplex_dim < self.dim

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_elements(self) -> int:
        return int(self.elements.shape[0])

    @property
    def n_dofs(self) -> int:
        return int(self.free.shape[0]) * self.dim

    @property
    def rest_q(self) -> np.ndarray:
        return dof_pack(self, self.vertices)

    @property
    def rest_pin_values(self) -> np.ndarray:
        return np.array(self.vertices[self.pinned], dtype=float)

    def rest_shape_matrix(self) -> np.ndarray:
        """Per-element rest edge matrix (in the element's local frame for shells)."""
        return _rest_shape_matrices(self.vertices, self.elements)

    def bbox_diagonal(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def element_dofs(self) -> np.ndarray:
        """(E, nv, dim) free-DOF index of every element corner coordinate, -1 if pinned."""
        return self.dof_index[self.elements]

    def with_pins(self, pinned: Iterable[int]) -> "Mesh":
        return build_mesh(self.vertices, self.elements, pinned=pinned)


def _rest_shape_matrices(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    x = vertices[elements]  # (E, k+1, dim)
    edges = np.swapaxes(x[:, 1:, :] - x[:, :1, :], 1, 2)  # (E, dim, k)
    k = elements.shape[1] - 1
    if k == vertices.shape[1]:
        return edges
    # shell triangle: express both edges in an orthonormal in-plane frame
    e0 = edges[:, :, 0]
    e1 = edges[:, :, 1]
    t0 = e0 / np.linalg.norm(e0, axis=1, keepdims=True)
    nrm = np.cross(e0, e1)
    t1 = np.cross(nrm / np.linalg.norm(nrm, axis=1, keepdims=True), t0)
    frame = np.stack([t0, t1], axis=1)  # (E, 2, 3)
    return np.einsum("eij,ejk->eik", frame, edges)


def build_mesh(
    vertices: np.ndarray,
    elements: np.ndarray,
    pinned: Iterable[int] = (),
) -> Mesh:
    """Validate geometry and precompute rest quantities."""
    vertices = np.asarray(vertices, dtype=np.float64)
    elements = np.asarray(elements, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] not in (2, 3):
        raise GeometryError("vertices must be an array of shape (V, 2) or (V, 3)")
    if elements.ndim != 2 or elements.shape[1] not in (3, 4):
        raise GeometryError("elements must be triangles or tetrahedra")
    n_vert, dim = vertices.shape
    k = elements.shape[1] - 1
    if k > dim:
        raise GeometryError("tetrahedra require 3D vertices")
    for e, el in enumerate(elements):
        if el.min() < 0 or el.max() >= n_vert:
            raise GeometryError(f"element {e} references a vertex outside [0, {n_vert})")
        if len(set(el.tolist())) != len(el):
            raise GeometryError(f"element {e} repeats a vertex")
    pinned_arr = np.array(sorted(set(int(p) for p in pinned)), dtype=np.int64)
    if pinned_arr.size and (pinned_arr[0] < 0 or pinned_arr[-1] >= n_vert):
        raise GeometryError("pinned vertex index out of range")

    if elements.shape[0]:
        dm = _rest_shape_matrices(vertices, elements)
        det = np.linalg.det(dm)
        measure = det / math.factorial(k)
        if k < dim:
            measure = np.abs(measure)
        bad = np.flatnonzero(~(measure > 1e-14 * max(1.0, float(np.abs(measure).max()))))
        if bad.size:
            e = int(bad[0])
            kind = "zero-measure" if abs(measure[e]) <= 1e-300 or k < dim else "inverted or zero-measure"
            raise GeometryError(f"element {e} has {kind} rest shape (measure {measure[e]:.3e})")
        rest_inv = np.linalg.inv(dm)
    else:
        rest_inv = np.zeros((0, k, k))
        measure = np.zeros(0)

    is_pinned = np.zeros(n_vert, dtype=bool)
    is_pinned[pinned_arr] = True
    free = np.flatnonzero(~is_pinned)
    dof_index = -np.ones((n_vert, dim), dtype=np.int64)
    dof_index[free] = np.arange(free.size * dim).reshape(free.size, dim)

    if k == 2 and dim == 3:
        hinges = extract_hinges(elements)
        rest_angle, weight = _hinge_rest(vertices, hinges)
    else:
        hinges = np.zeros((0, 4), dtype=np.int64)
        rest_angle = np.zeros(0)
        weight = np.zeros(0)

    return Mesh(
        vertices=_frozen(vertices),
        elements=_frozen(elements),
        pinned=_frozen(pinned_arr),
        rest_inverse=_frozen(rest_inv),
        rest_measure=_frozen(measure),
        hinges=_frozen(hinges),
        hinge_rest_angle=_frozen(rest_angle),
        hinge_weight=_frozen(weight),
        free=_frozen(free),
        dof_index=_frozen(dof_index),
    )


def extract_hinges(triangles: np.ndarray) -> np.ndarray:
    """One hinge ``(v0, v1, a, b)`` per interior edge, sorted by ``(v0, v1)``.

    ``a`` is opposite the edge in the triangle that traverses it as ``v0 -> v1``
    so that a consistently oriented flat sheet has dihedral angle zero.
    """
    edge_faces: dict = {}
    for t, tri in enumerate(np.asarray(triangles).tolist()):
        for i in range(3):
            u, v, w = tri[i], tri[(i + 1) % 3], tri[(i + 2) % 3]
            key = (min(u, v), max(u, v))
            edge_faces.setdefault(key, []).append((u, v, w))
    hinges = []
    for (v0, v1), faces in sorted(edge_faces.items()):
        if len(faces) != 2:
            continue
        (u_a, _, w_a), (_, _, w_b) = faces
        if u_a == v0:
            a, b = w_a, w_b
        else:
            a, b = w_b, w_a
        hinges.append((v0, v1, a, b))
    return np.array(hinges, dtype=np.int64).reshape(-1, 4)


def dihedral_angles(x: np.ndarray, hinges: np.ndarray) -> np.ndarray:
    x0, x1, xa, xb = (x[hinges[:, i]] for i in range(4))
    e = x1 - x0
    n1 = np.cross(e, xa - x0)
    n2 = np.cross(xb - x0, e)
    en = e / np.linalg.norm(e, axis=1, keepdims=True)
    s = np.einsum("ij,ij->i", np.cross(n1, n2), en)
    c = np.einsum("ij,ij->i", n1, n2)
    return np.arctan2(s, c)


def _hinge_rest(vertices, hinges):
    if hinges.shape[0] == 0:
        return np.zeros(0), np.zeros(0)
    theta = dihedral_angles(vertices, hinges)
    x0, x1, xa, xb = (vertices[hinges[:, i]] for i in range(4))
    e = x1 - x0
    a1 = 0.5 * np.linalg.norm(np.cross(e, xa - x0), axis=1)
    a2 = 0.5 * np.linalg.norm(np.cross(xb - x0, e), axis=1)
    # edge length over height scale h = (A1 + A2) / (3 |e|)
    weight = 3.0 * np.einsum("ij,ij->i", e, e) / (a1 + a2)
    return theta, weight


# ---------------------------------------------------------------------------
# file IO


def _data_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _read_node_ele(path: str):
    base = path
    for suffix in (".node", ".ele"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
    node_path, ele_path = base + ".node", base + ".ele"
    for p in (node_path, ele_path):
        if not os.path.exists(p):
            raise FormatError("file not found", path=p)

    lines = list(_data_lines(node_path))
    if not lines:
        raise FormatError("empty node file", path=node_path)
    lineno, head = lines[0]
    try:
        n_pts, dim = int(head[0]), int(head[1])
    except (ValueError, IndexError):
        raise FormatError("bad node header", path=node_path, line=lineno) from None
    ids, verts = [], []
    for lineno, tok in lines[1 : n_pts + 1]:
        try:
            ids.append(int(tok[0]))
            verts.append([float(t) for t in tok[1 : 1 + dim]])
        except (ValueError, IndexError):
            raise FormatError("bad node line", path=node_path, line=lineno) from None
        if len(verts[-1]) != dim:
            raise FormatError("node line has too few coordinates", path=node_path, line=lineno)
    if len(verts) != n_pts:
        raise FormatError(f"expected {n_pts} nodes, found {len(verts)}", path=node_path)
    base_index = min(ids) if ids else 0
    id_map = {v: i for i, v in enumerate(ids)}

    lines = list(_data_lines(ele_path))
    if not lines:
        raise FormatError("empty element file", path=ele_path)
    lineno, head = lines[0]
    try:
        n_el, per = int(head[0]), int(head[1])
    except (ValueError, IndexError):
        raise FormatError("bad element header", path=ele_path, line=lineno) from None
    if per < 4:
        raise FormatError("only linear tetrahedra are supported", path=ele_path, line=lineno)
    elems = []
    for lineno, tok in lines[1 : n_el + 1]:
        try:
            raw = [int(t) for t in tok[1:5]]
        except (ValueError, IndexError):
            raise FormatError("bad element line", path=ele_path, line=lineno) from None
        if len(raw) != 4:
            raise FormatError("element line has too few vertices", path=ele_path, line=lineno)
        # unknown ids map outside the valid range so that build_mesh reports them
        elems.append([id_map.get(v, len(ids) + abs(v - base_index)) for v in raw])
    if len(elems) != n_el:
        raise FormatError(f"expected {n_el} elements, found {len(elems)}", path=ele_path)
    return np.array(verts, dtype=float), np.array(elems, dtype=np.int64).reshape(-1, 4)


def _read_obj(path: str):
    if not os.path.exists(path):
        raise FormatError("file not found", path=path)
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            tok = raw.split("#", 1)[0].split()
            if not tok:
                continue
            if tok[0] == "v":
                try:
                    verts.append([float(t) for t in tok[1:4]])
                except ValueError:
                    raise FormatError("bad vertex line", path=path, line=lineno) from None
                if len(verts[-1]) != 3:
                    raise FormatError("vertex needs 3 coordinates", path=path, line=lineno)
            elif tok[0] == "f":
                idx = []
                for t in tok[1:]:
                    try:
                        i = int(t.split("/")[0])
                    except ValueError:
                        raise FormatError("bad face index", path=path, line=lineno) from None
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) != 3:
                    raise FormatError("only triangular faces are supported", path=path, line=lineno)
                faces.append(idx)
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def load_mesh(
    path: str,
    format: Optional[str] = None,
    dim: Optional[int] = None,
    pinned: Iterable[int] = (),
) -> Mesh:
    """Load a tetrahedral node/ele pair or a triangle OBJ.

    For OBJ files ``dim`` selects planar 2D (z dropped) or a 3D shell; when
    omitted, a file whose z coordinates are all zero is read as planar.
    """
    path = os.fspath(path)
    if format is None:
        format = "obj" if path.lower().endswith(".obj") else "tet"
    if format in ("tet", "node", "ele", "tet-node/ele"):
        verts, elems = _read_node_ele(path)
    elif format in ("obj", "obj-triangle"):
        verts, elems = _read_obj(path)
        if dim is None:
            dim = 2 if verts.size == 0 or np.all(verts[:, 2] == 0.0) else 3
        if dim == 2:
            verts = verts[:, :2]
    else:
        raise FormatError(f"unknown mesh format {format!r}", path=path)
    return build_mesh(verts, elems, pinned=pinned)


def write_obj(mesh: Mesh, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            xyz = list(v) + [0.0] * (3 - len(v))
            fh.write("v {!r} {!r} {!r}\n".format(*map(float, xyz)))
        for el in mesh.elements:
            fh.write("f {} {} {}\n".format(*(int(i) + 1 for i in el)))


def write_node_ele(mesh: Mesh, base: str) -> None:
    with open(base + ".node", "w", encoding="utf-8") as fh:
        fh.write(f"{mesh.n_vertices} 3 0 0\n")
        for i, v in enumerate(mesh.vertices):
            fh.write("{} {!r} {!r} {!r}\n".format(i, *map(float, v)))
    with open(base + ".ele", "w", encoding="utf-8") as fh:
        fh.write(f"{mesh.n_elements} 4 0\n")
        for i, el in enumerate(mesh.elements):
            fh.write("{} {} {} {} {}\n".format(i, *map(int, el)))


# ---------------------------------------------------------------------------
# generators


def bar_2d(nx: int, ny: int, length: float = 1.0, height: float = 0.2, pinned=()) -> Mesh:
    """Structured triangulated rectangle with alternating diagonals."""
    xs = np.linspace(0.0, length, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    verts = np.array([[x, y] for y in ys for x in xs])
    vid = lambda i, j: j * (nx + 1) + i  # noqa: E731
    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    return build_mesh(verts, np.array(tris), pinned=pinned)


def cloth_grid(nx: int, ny: int, width: float = 1.0, depth: float = 1.0, height: float = 0.0, pinned=()) -> Mesh:
    """Flat triangulated sheet in the plane z = height (3D shell)."""
    base = bar_2d(nx, ny, width, depth)
    verts = np.column_stack([base.vertices, np.full(base.n_vertices, height)])
    return build_mesh(verts, base.elements, pinned=pinned)


_KUHN = ((0, 1, 3, 7), (0, 1, 5, 7), (0, 2, 3, 7), (0, 2, 6, 7), (0, 4, 5, 7), (0, 4, 6, 7))


def bar_3d(nx: int, ny: int, nz: int, size=(1.0, 0.2, 0.2), pinned=()) -> Mesh:
    """Structured tetrahedral box, six Kuhn tetrahedra per cell."""
    xs, ys, zs = (np.linspace(0.0, s, m + 1) for s, m in zip(size, (nx, ny, nz)))
    verts = np.array([[x, y, z] for z in zs for y in ys for x in xs])
    vid = lambda i, j, k: (k * (ny + 1) + j) * (nx + 1) + i  # noqa: E731
    tets = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                corner = [vid(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)) for c in range(8)]
                for t in _KUHN:
                    tet = [corner[c] for c in t]
                    x = verts[tet]
                    if np.linalg.det((x[1:] - x[0]).T) < 0:
                        tet[2], tet[3] = tet[3], tet[2]
                    tets.append(tet)
    return build_mesh(verts, np.array(tets), pinned=pinned)


# ---------------------------------------------------------------------------
# mass and DOFs


@dataclass(frozen=True, eq=False)
class MassMatrix:
    """Lumped diagonal mass over the free DOFs."""

    diag: np.ndarray
    vertex_mass: np.ndarray

    @property
    def total(self) -> float:
        return float(self.vertex_mass.sum())

    def norm_sq(self, v: np.ndarray) -> np.ndarray:
        return np.sum(self.diag * v * v, axis=-1)


def lump_mass(mesh: Mesh, mat: MaterialParams) -> MassMatrix:
    k = mesh.elements.shape[1]
    share = np.repeat(mat.density * mesh.rest_measure / k, k)
    vertex_mass = np.bincount(mesh.elements.ravel(), weights=share, minlength=mesh.n_vertices)
    lonely = np.flatnonzero(vertex_mass[mesh.free] <= 0)
    if lonely.size:
        raise GeometryError(f"free vertex {int(mesh.free[lonely[0]])} belongs to no element")
    diag = np.repeat(vertex_mass[mesh.free], mesh.dim)
    return MassMatrix(diag=_frozen(diag), vertex_mass=_frozen(vertex_mass))


def dof_pack(mesh: Mesh, full_positions: np.ndarray) -> np.ndarray:
    full_positions = np.asarray(full_positions, dtype=float)
    if full_positions.shape[-2:] != (mesh.n_vertices, mesh.dim):
        raise ValueError(
            f"expected positions of shape (..., {mesh.n_vertices}, {mesh.dim}), got {full_positions.shape}"
        )
    lead = full_positions.shape[:-2]
    return full_positions[..., mesh.free, :].reshape(lead + (mesh.n_dofs,))


def dof_unpack(mesh: Mesh, q: np.ndarray, pin_values: Optional[np.ndarray] = None) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != mesh.n_dofs:
        raise ValueError(f"expected q of length {mesh.n_dofs}, got {q.shape[-1]}")
    if pin_values is None:
        pin_values = mesh.vertices[mesh.pinned]
    pin_values = np.asarray(pin_values, dtype=float)
    if pin_values.shape != (mesh.pinned.size, mesh.dim):
        raise ValueError(f"expected pin_values of shape ({mesh.pinned.size}, {mesh.dim}), got {pin_values.shape}")
    lead = q.shape[:-1]
    out = np.empty(lead + (mesh.n_vertices, mesh.dim))
    out[..., mesh.free, :] = q.reshape(lead + (mesh.free.size, mesh.dim))
    out[..., mesh.pinned, :] = pin_values
    return out


def select_vertices(mesh: Mesh, rule) -> np.ndarray:
    """Vertex indices picked by a selection rule.

    ``rule`` is a list of indices or a dict with any of ``x_min``/``x_max``/
    ``y_min``/... bounds (inclusive, with a small tolerance).
    """
    if isinstance(rule, (list, tuple, np.ndarray)):
        return np.array(sorted(int(i) for i in rule), dtype=np.int64)
    mask = np.ones(mesh.n_vertices, dtype=bool)
    tol = 1e-9 * max(1.0, mesh.bbox_diagonal())
    for axis, name in enumerate("xyz"[: mesh.dim]):
        if f"{name}_min" in rule:
            mask &= mesh.vertices[:, axis] >= float(rule[f"{name}_min"]) - tol
        if f"{name}_max" in rule:
            mask &= mesh.vertices[:, axis] <= float(rule[f"{name}_max"]) + tol
    return np.flatnonzero(mask)
