"""Lipschitz estimates, projection error and benchmark tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ModeError
from .full_solver import Dataset
from .mesh import MassMatrix
from .network import SubspaceModel, decode, decode_jet, encode
from .reduced import ReducedPotential
from .solver import (
    CONVERGED,
    EXIT_CODES,
    ExitReport,
    ReducedSystem,
    SimState,
    SolverConfig,
    lbfgs_minimize,
    step,
)
from .training import SUPERVISED, sample_pullback


def _flat_derivative(d, order):
    if order == 0:
        return d.value[:, None]
    if order == 1:
        return d.gradient
    return d.hessian.reshape(d.hessian.shape[0], -1)


def pairwise_lipschitz(D: np.ndarray, z: np.ndarray) -> float:
    """``max_{i<j} |D_i - D_j|_F / |z_i - z_j|`` over rows, duplicates dropped."""
    z = np.asarray(z, dtype=float)
    _, keep = np.unique(z, axis=0, return_index=True)
    keep = np.sort(keep)
    z, D = z[keep], D[keep]
    best = 0.0
    for i in range(z.shape[0] - 1):
        num = np.sqrt(np.sum((D[i + 1:] - D[i]) ** 2, axis=1))
        den = np.sqrt(np.sum((z[i + 1:] - z[i]) ** 2, axis=1))
        best = max(best, float(np.max(num / den)))
    return best


def lipschitz_samples(model: SubspaceModel, dataset: Optional[Dataset], sample_count: int, seed: int,
                      mode: Optional[str] = None) -> np.ndarray:
    mode = mode or (SUPERVISED if model.supervised else "unsupervised")
    rng = np.random.default_rng(seed)
    return sample_pullback(model, mode, dataset, rng, sample_count)


def estimate_lipschitz(model: SubspaceModel, potential, order: int = 2, sample_count: int = 64, seed: int = 0,
                       cubature=None, dataset: Optional[Dataset] = None, z=None) -> float:
    """Order-statistics estimate of the Lipschitz constant of ``D^o P``.

    Samples come from the pull-back distribution unless ``z`` is given. The
    full term set is used unless a cubature is passed explicitly.
    """
    if sample_count < 2 and z is None:
        raise ValueError("sample_count must be >= 2")
    if z is None:
        z = lipschitz_samples(model, dataset, sample_count, seed)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    rp = ReducedPotential(potential, cubature)
    D = []
    for s in range(0, z.shape[0], 16):
        D.append(_flat_derivative(rp.derivatives(model, z[s:s + 16], max(order, 0)), order))
    return pairwise_lipschitz(np.vstack(D), z)


# ---------------------------------------------------------------------------
# projection error


@dataclass
class ProjectionResult:
    errors: np.ndarray  # per-vertex mean distance after projection
    init_errors: np.ndarray  # same for the encoder initialisation
    flagged: np.ndarray  # solver did not converge
    z: np.ndarray

    def summary(self) -> dict:
        e = self.errors
        return {"mean": float(np.mean(e)), "median": float(np.median(e)), "p90": float(np.quantile(e, 0.9)),
                "max": float(np.max(e)), "flagged": int(np.sum(self.flagged)), "count": int(e.size)}


def _vertex_error(dq, dim):
    d = dq.reshape(-1, dim)
    return float(np.mean(np.linalg.norm(d, axis=1)))


def projection_error(model: SubspaceModel, states, mass: MassMatrix, dim: int, cfg: Optional[SolverConfig] = None):
    """Closest point of ``decode`` to each state in the mass norm, from ``encode(q)``."""
    if model.encoder is None:
        raise ModeError("projection error needs an encoder for initialisation")
    cfg = cfg or SolverConfig(epsilon=1e-10, max_iters=500)
    M = mass.diag
    errs, inits, flags, zs = [], [], [], []
    for q in np.atleast_2d(np.asarray(states, dtype=float)):
        z0 = encode(model, q)

        def fun(z):
            j = decode_jet(model, z, order=1)
            r = np.asarray(j.v) - q
            return 0.5 * float(r @ (M * r)), np.asarray(j.d) @ (M * r)

        z, rep = lbfgs_minimize(fun, z0, cfg)
        e0 = _vertex_error(decode(model, z0) - q, dim)
        e = _vertex_error(decode(model, z) - q, dim)
        if e0 < e:
            z, e = z0, e0  # the reported metric is Euclidean, the objective is mass-weighted
        errs.append(e)
        inits.append(e0)
        flags.append(rep.code != CONVERGED)
        zs.append(z)
    return ProjectionResult(np.array(errs), np.array(inits), np.array(flags), np.array(zs))


def reconstruction_errors(model: SubspaceModel, states, dim: int) -> np.ndarray:
    Q = np.atleast_2d(np.asarray(states, dtype=float))
    rec = decode(model, encode(model, Q))
    return np.array([_vertex_error(r - q, dim) for r, q in zip(rec, Q)])


# ---------------------------------------------------------------------------
# reduced simulation and benchmarks


@dataclass
class Trajectory:
    states: List[SimState]
    reports: List[ExitReport]


def simulate_reduced(system: ReducedSystem, frames, cfg: SolverConfig, quasistatic: bool = False,
                     z0=None) -> Trajectory:
    from .solver import initial_state

    state = initial_state(system, z0=z0)
    states, reports = [], []
    for frame in frames:
        state, rep = step(system, state, frame, cfg, quasistatic)
        states.append(state)
        reports.append(rep)
    return Trajectory(states, reports)


@dataclass
class BenchRecord:
    scenario: str
    variant: str
    method: str
    epsilon: float
    runtime_cubature: str
    reports: List[ExitReport]
    lipschitz: Dict[int, float] = field(default_factory=dict)
    projection: Dict[str, float] = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.reports)

    @property
    def mean_iterations(self) -> float:
        return float(np.mean([r.iterations for r in self.reports])) if self.reports else float("nan")

    @property
    def mean_step_time(self) -> float:
        return float(np.mean([r.wall_time for r in self.reports])) if self.reports else float("nan")

    def frequencies(self) -> Dict[str, float]:
        n = len(self.reports)
        counts = {c: 0 for c in EXIT_CODES}
        for r in self.reports:
            counts[r.code] += 1
        return {c: counts[c] / n if n else 0.0 for c in EXIT_CODES}

    def counts(self) -> Dict[str, int]:
        counts = {c: 0 for c in EXIT_CODES}
        for r in self.reports:
            counts[r.code] += 1
        return counts

    def exit_grad(self, code: str) -> float:
        vals = [r.final_grad_inf_norm for r in self.reports if r.code == code]
        return float(np.mean(vals)) if vals else float("nan")


def run_benchmark(scenario, models: Dict[str, SubspaceModel], epsilons: Sequence[float] = (1e-4, 1e-5, 1e-6),
                  methods: Sequence[str] = ("lbfgs",), runtime_cubature=None, frames=None,
                  base_cfg: Optional[SolverConfig] = None, lipschitz_count: int = 0,
                  lipschitz_dataset: Optional[Dataset] = None, seed: int = 0,
                  cubature_label: str = "none") -> List[BenchRecord]:
    """Replay identical frames through every variant x method x epsilon cell.

    With ``lipschitz_count > 0`` each variant also gets order 0/1/2 estimates
    from its own pull-back samples (same seed for every variant).
    """
    mass = scenario.mass()
    pot = scenario.potential()
    frames = frames if frames is not None else scenario.replay_frames(mass)
    base = base_cfg or SolverConfig(dt=scenario.dt)
    records = []
    for name, model in models.items():
        if model.n != scenario.n:
            raise ConfigError(f"model {name!r} has n = {model.n}, scenario {scenario.id!r} has n = {scenario.n}")
        system = ReducedSystem(pot, mass, model, runtime_cubature)
        lips = {}
        if lipschitz_count > 0:
            z = lipschitz_samples(model, lipschitz_dataset, lipschitz_count, seed)
            for o in (0, 1, 2):
                lips[o] = estimate_lipschitz(model, pot, o, z=z)
        for method in methods:
            for eps in epsilons:
                cfg = SolverConfig(epsilon=eps, max_iters=base.max_iters, max_linesearch=base.max_linesearch,
                                   lbfgs_history=base.lbfgs_history, dt=scenario.dt, method=method,
                                   armijo_c=base.armijo_c)
                traj = simulate_reduced(system, frames, cfg, scenario.quasistatic)
                records.append(BenchRecord(scenario.id, name, method, eps, cubature_label, traj.reports, lips))
    return records


# ---------------------------------------------------------------------------
# CSV schemas

BENCH_COLUMNS = [
    "scenario", "variant", "method", "epsilon", "runtime_cubature", "steps",
    "pct_I", "pct_II", "pct_III", "pct_IV",
    "count_I", "count_II", "count_III", "count_IV",
    "grad_exit_I", "grad_exit_II", "grad_exit_III", "grad_exit_IV",
    "mean_iterations", "max_iterations", "lip0", "lip1", "lip2",
]

STEP_COLUMNS = ["scenario", "variant", "method", "epsilon", "step", "code", "iterations", "evaluations",
                "final_grad_inf_norm", "energy"]

TIMING_COLUMNS = ["scenario", "variant", "method", "epsilon", "mean_step_time_s", "total_time_s"]


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def bench_rows(records: Sequence[BenchRecord]):
    rows = []
    for r in records:
        c = r.counts()
        rows.append([
            r.scenario, r.variant, r.method, r.epsilon, r.runtime_cubature, r.steps,
            *(100.0 * c[k] / max(r.steps, 1) for k in EXIT_CODES),
            *(c[k] for k in EXIT_CODES),
            *(r.exit_grad(k) for k in EXIT_CODES),
            r.mean_iterations, max((x.iterations for x in r.reports), default=0),
            r.lipschitz.get(0, float("nan")), r.lipschitz.get(1, float("nan")), r.lipschitz.get(2, float("nan")),
        ])
    return rows


def step_rows(records: Sequence[BenchRecord]):
    rows = []
    for r in records:
        for k, rep in enumerate(r.reports):
            rows.append([r.scenario, r.variant, r.method, r.epsilon, k, rep.code, rep.iterations, rep.evaluations,
                         rep.final_grad_inf_norm, rep.energy])
    return rows


def timing_rows(records: Sequence[BenchRecord]):
    return [[r.scenario, r.variant, r.method, r.epsilon, r.mean_step_time, sum(x.wall_time for x in r.reports)]
            for r in records]


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(columns, rows))

