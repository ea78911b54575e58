"""Full-space projective Newton reference and supervised dataset generation."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .energy import Potential
from .errors import FormatError, NumericError
from .mesh import MassMatrix
from .solver import CONVERGED, Frame, SimState, SolverConfig, _descent_loop, inertial_guess

log = logging.getLogger(__name__)

DATASET_FORMAT = "lipsub-dataset/1"


def full_objective(potential: Potential, mass: MassMatrix, q, qbar, dt, f_ext=None, quasistatic=False,
                   want_hessian=False):
    pot = potential.assemble(q, want_hessian=want_hessian, project=want_hessian)
    if quasistatic:
        E = pot.value - (float(f_ext @ q) if f_ext is not None else 0.0)
        g = pot.gradient - (f_ext if f_ext is not None else 0.0)
        H = pot.hessian
    else:
        dq = q - qbar
        w = mass.diag / (dt * dt)
        E = 0.5 * float(dq @ (w * dq)) + pot.value
        g = w * dq + pot.gradient
        H = pot.hessian + sp.diags(w) if want_hessian else None
    return E, g, H


def full_minimize(potential, mass, q0, cfg: SolverConfig, qbar=None, f_ext=None, quasistatic=False):
    """Newton with per-element projected Hessian, sparse LU solve and Armijo backtracking."""
    cache = {}

    def fun(q):
        E, g, H = full_objective(potential, mass, q, qbar, cfg.dt, f_ext, quasistatic, want_hessian=True)
        cache["x"], cache["H"] = q, H
        return E, g

    def direction(q, g):
        if cache.get("x") is not q:
            fun(q)
        try:
            lu = splu(cache["H"].tocsc())
            d = -lu.solve(g)
        except RuntimeError as exc:
            raise NumericError(f"sparse factorization failed: {exc}") from None
        return d

    return _descent_loop(fun, q0, cfg, direction)


def full_step(potential: Potential, mass: MassMatrix, state: SimState, frame: Frame, cfg: SolverConfig,
              quasistatic: bool = False):
    pot = potential.with_pins(frame.pin_values) if frame.pin_values is not None else potential
    if quasistatic:
        q, rep = full_minimize(pot, mass, state.q, cfg, None, frame.f_ext, True)
        return SimState(q, np.zeros_like(q), None, state.t + cfg.dt), rep
    qbar = inertial_guess(state, frame.f_ext, mass, cfg.dt)
    q, rep = full_minimize(pot, mass, state.q, cfg, qbar)
    return SimState(q, (q - state.q) / cfg.dt, None, state.t + cfg.dt), rep


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    snapshots: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.snapshots = np.ascontiguousarray(self.snapshots, dtype=float)
        if self.snapshots.ndim != 2:
            raise ValueError("snapshots must be a (frames, n) matrix")

    def __len__(self):
        return self.snapshots.shape[0]

    @property
    def n(self) -> int:
        return self.snapshots.shape[1]

    def split(self, holdout_every: int):
        """Every ``holdout_every``-th frame goes to the second dataset."""
        idx = np.arange(len(self))
        held = idx % holdout_every == holdout_every - 1
        return (Dataset(self.snapshots[~held], dict(self.provenance, split="train")),
                Dataset(self.snapshots[held], dict(self.provenance, split="heldout")))


def simulate_full(scenario, frames, cfg: SolverConfig, q0=None):
    """Run the full-space reference over ``frames``; returns (states, reports)."""
    mesh = scenario.mesh
    mass = scenario.mass()
    pot = scenario.potential()
    q = mesh.rest_q if q0 is None else np.asarray(q0, dtype=float)
    state = SimState(q.copy(), np.zeros_like(q), None, 0.0)
    states, reports = [], []
    for frame in frames:
        state, rep = full_step(pot, mass, state, frame, cfg, scenario.quasistatic)
        states.append(state)
        reports.append(rep)
    return states, reports


def generate_dataset(scenario, cfg: SolverConfig, seed: int) -> Dataset:
    """Seeded full-space episodes from rest; one snapshot per step.

    An episode is dropped if the solver raises or ends in a non-converged
    state (exit III or IV).
    """
    it = scenario.interactions
    seeds = np.random.SeedSequence(seed).spawn(max(it.episodes, 0))
    mass = scenario.mass()
    rows, episodes = [], []
    for e, ss in enumerate(seeds):
        ep_seed = int(ss.generate_state(1)[0])
        frames = scenario.frames(ep_seed, it.steps, mass)
        record = {"index": e, "seed": ep_seed, "steps": it.steps}
        try:
            states, reports = simulate_full(scenario, frames, cfg)
        except NumericError as exc:
            log.warning("episode %d dropped: %s", e, exc)
            episodes.append(dict(record, dropped=True, reason=str(exc), frames=0))
            continue
        bad = [r.code for r in reports if r.code not in (CONVERGED, "II")]
        if bad:
            log.warning("episode %d dropped: solver exits %s", e, sorted(set(bad)))
            episodes.append(dict(record, dropped=True, reason=f"exit codes {sorted(set(bad))}", frames=0))
            continue
        rows.extend(s.q for s in states)
        episodes.append(dict(record, dropped=False, frames=len(states),
                             max_iterations=int(max(r.iterations for r in reports)) if reports else 0))
    snaps = np.array(rows) if rows else np.zeros((0, scenario.n))
    prov = {"scenario": scenario.id, "seed": int(seed), "episodes": episodes, "frames": int(snaps.shape[0]),
            "solver": {"epsilon": cfg.epsilon, "dt": cfg.dt, "max_iters": cfg.max_iters}}
    return Dataset(snaps, prov)


def save_dataset(ds: Dataset, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {"format": DATASET_FORMAT, "frames": len(ds), "n": ds.n, "dtype": "<f8", "order": "row-major",
                "provenance": ds.provenance}
    with open(os.path.join(directory, "snapshots.f64"), "wb") as fh:
        fh.write(ds.snapshots.astype("<f8").tobytes())
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(directory) -> Dataset:
    mpath = os.path.join(directory, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError("dataset manifest not found", mpath) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid dataset manifest: {exc}", mpath, exc.lineno) from None
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"unsupported dataset format {manifest.get('format')!r}", mpath)
    raw = np.fromfile(os.path.join(directory, "snapshots.f64"), dtype="<f8")
    frames, n = int(manifest["frames"]), int(manifest["n"])
    if raw.size != frames * n:
        raise FormatError(f"snapshot blob holds {raw.size} values, manifest expects {frames * n}",
                          os.path.join(directory, "snapshots.f64"))
    return Dataset(raw.reshape(frames, n).astype(float), manifest.get("provenance", {}))



