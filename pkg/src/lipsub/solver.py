"""Reduced implicit-Euler / quasi-static stepping with L-BFGS or projective Newton."""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .energy import Potential
from .errors import ConfigError, NumericError
from .mesh import MassMatrix
from .network import SubspaceModel, decode, decode_jet, encode

CONVERGED, SADDLE, LINESEARCH_CAP, ITERATION_CAP = "I", "II", "III", "IV"
EXIT_CODES = (CONVERGED, SADDLE, LINESEARCH_CAP, ITERATION_CAP)


@dataclass
class SolverConfig:
    epsilon: float = 1e-5
    max_iters: int = 1024
    max_linesearch: int = 128
    lbfgs_history: int = 8
    dt: float = 0.05
    method: str = "lbfgs"
    armijo_c: float = 1e-4
    runtime_cubature: object = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1 or self.max_linesearch < 1 or self.lbfgs_history < 1:
            raise ValueError("iteration caps and history must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.method not in ("lbfgs", "projective_newton"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class ExitReport:
    code: str
    iterations: int
    final_grad_inf_norm: float
    wall_time: float = 0.0
    energy: float = float("nan")
    evaluations: int = 0

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "code": self.code,
            "iterations": int(self.iterations),
            "final_grad_inf_norm": float(self.final_grad_inf_norm),
            "energy": float(self.energy),
            "evaluations": int(self.evaluations),
        }
        if timing:
            d["wall_time"] = float(self.wall_time)
        return d


@dataclass
class SimState:
    q: np.ndarray
    v: np.ndarray
    z: Optional[np.ndarray] = None
    t: float = 0.0


@dataclass
class Frame:
    """Per-step inputs: external force on free DOFs and pinned-vertex positions."""

    f_ext: np.ndarray
    pin_values: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# line-search minimisers


class _Eval:
    def __init__(self, fun):
        self.fun = fun
        self.count = 0

    def __call__(self, x):
        self.count += 1
        return self.fun(x)


def _sufficient_decrease(f, fn, slope, slope_n, alpha, c):
    """Armijo on values, with a derivative fallback once ``f`` stops resolving the decrease.

    Close to a minimiser the predicted decrease drops below the rounding of
    ``f`` and the value test rejects even exact steps. Inside that rounding
    band the trapezoidal estimate of the decrease, ``(slope + slope_n) / 2``,
    is used instead (the approximate Wolfe test of Hager and Zhang).
    """
    if fn <= f + c * alpha * slope:
        return True
    return fn <= f + 1e-10 * abs(f) and slope_n <= (2.0 * c - 1.0) * slope


def _descent_loop(fun, x0, cfg: SolverConfig, direction, update=None):
    """Shared driver: direction -> descent test -> backtracking Armijo."""
    t0 = time.perf_counter()
    ev = _Eval(fun)
    x = np.array(x0, dtype=float)
    f, g = ev(x)[:2]
    it = 0

    def report(code):
        return x, ExitReport(code, it, float(np.max(np.abs(g))) if g.size else 0.0,
                             time.perf_counter() - t0, float(f), ev.count)

    while True:
        if g.size == 0 or np.max(np.abs(g)) < cfg.epsilon:
            return report(CONVERGED)
        if it >= cfg.max_iters:
            return report(ITERATION_CAP)
        d = direction(x, g)
        slope = float(g @ d)
        if not np.isfinite(slope) or slope >= 0.0:
            return report(SADDLE)
        alpha = 1.0
        accepted = None
        for _ in range(cfg.max_linesearch):
            xn = x + alpha * d
            try:
                fn, gn = ev(xn)[:2]
            except NumericError:
                fn = np.inf
            if np.isfinite(fn) and _sufficient_decrease(f, fn, slope, float(gn @ d), alpha, cfg.armijo_c):
                accepted = (xn, fn, gn)
                break
            alpha *= 0.5
        if accepted is None:
            return report(LINESEARCH_CAP)
        xn, fn, gn = accepted
        if update is not None:
            update(xn - x, gn - g)
        x, f, g = xn, fn, gn
        it += 1


def lbfgs_minimize(fun: Callable, z0, cfg: SolverConfig):
    """Minimise ``fun(z) -> (value, gradient)``; returns ``(z*, ExitReport)``."""
    S, Y = deque(maxlen=cfg.lbfgs_history), deque(maxlen=cfg.lbfgs_history)

    def direction(x, g):
        if not S:
            return -g
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            alphas.append((a, rho, s, y))
            q -= a * y
        s_last, y_last = S[-1], Y[-1]
        gamma = (s_last @ y_last) / (y_last @ y_last)
        rvec = gamma * q
        for a, rho, s, y in reversed(alphas):
            b = rho * (y @ rvec)
            rvec += (a - b) * s
        return -rvec

    def update(s, y):
        # a pair without positive curvature would make the two-loop operator
        # indefinite; the memory is restarted instead (next step is -g)
        sy = s @ y
        if np.isfinite(sy) and sy > 1e-14 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
        else:
            S.clear()
            Y.clear()

    return _descent_loop(fun, z0, cfg, direction, update)


def clamp_spd(H: np.ndarray) -> np.ndarray:
    """Eigenvalue clamp of a small dense symmetric matrix at ``1e-10 * lambda_max``."""
    H = 0.5 * (H + H.T)
    lam, V = np.linalg.eigh(H)
    top = np.max(np.abs(lam)) if lam.size else 0.0
    if not np.isfinite(top) or top == 0.0:
        raise NumericError("reduced Hessian is zero or non-finite; cannot form a Newton step")
    lam = np.maximum(lam, 1e-10 * top)
    return (V * lam) @ V.T


def projective_newton_minimize(fun_h: Callable, z0, cfg: SolverConfig):
    """``fun_h(z) -> (value, gradient, hessian)``; Newton with eigen-clamped Hessian."""
    cache = {}

    def fun(x):
        f, g, H = fun_h(x)
        cache["H"] = H
        cache["x"] = x
        return f, g

    def direction(x, g):
        if cache.get("x") is not x:
            fun(x)
        Hp = clamp_spd(cache["H"])
        try:
            L = np.linalg.cholesky(Hp)
        except np.linalg.LinAlgError:
            try:
                return -np.linalg.solve(Hp, g)
            except np.linalg.LinAlgError as exc:
                raise NumericError(f"Newton solve failed: {exc}") from None
        y = np.linalg.solve(L, g)
        return -np.linalg.solve(L.T, y)

    return _descent_loop(fun, z0, cfg, direction)


# ---------------------------------------------------------------------------
# reduced system


class ReducedSystem:
    """Reduced objective ``E(z)`` for one mesh/material/model triple."""

    def __init__(self, potential: Potential, mass: MassMatrix, model: SubspaceModel, runtime_cubature=None):
        if model.n != potential.mesh.n_dofs:
            raise ConfigError(f"model has n = {model.n} but the mesh has {potential.mesh.n_dofs} free DOFs")
        self.potential = potential
        self.mass = mass
        self.model = model
        self.cubature = runtime_cubature

    def with_pins(self, pin_values) -> "ReducedSystem":
        return ReducedSystem(self.potential.with_pins(pin_values), self.mass, self.model, self.cubature)

    def _parts(self, z, qbar, dt, f_ext, quasistatic, order):
        j = decode_jet(self.model, np.asarray(z, dtype=float), order=order)
        q = np.asarray(j.v)
        J = np.asarray(j.d).T
        pot = self.potential.assemble(q, want_hessian=order >= 2, subset=self.cubature)
        M = self.mass.diag
        if quasistatic:
            inert = 0.0
            res = pot.gradient.copy()
            if f_ext is not None:
                res -= f_ext
            E = pot.value - (float(f_ext @ q) if f_ext is not None else 0.0)
        else:
            dq = q - qbar
            inert = float(dq @ (M * dq)) / (2.0 * dt * dt)
            res = M * dq / (dt * dt) + pot.gradient
            E = inert + pot.value
        g = J.T @ res
        if not (np.isfinite(E) and np.all(np.isfinite(g))):
            raise NumericError(f"non-finite reduced objective at z = {np.asarray(z).tolist()}")
        return E, g, j, J, res, pot

    def objective(self, z, qbar=None, dt=0.05, f_ext=None, quasistatic=False):
        E, g = self._parts(z, qbar, dt, f_ext, quasistatic, 1)[:2]
        return E, g

    def objective_hessian(self, z, qbar=None, dt=0.05, f_ext=None, quasistatic=False):
        E, g, j, J, res, pot = self._parts(z, qbar, dt, f_ext, quasistatic, 2)
        HJ = pot.hessian @ J
        if not quasistatic:
            HJ = HJ + (self.mass.diag / (dt * dt))[:, None] * J
        H = J.T @ HJ
        if j.dd is not None:  # affine decoders carry no curvature
            r = self.model.r
            curv = np.asarray(j.dd) @ res
            Hc = np.zeros((r, r))
            Hc[j.pairs.I, j.pairs.J] = curv
            Hc[j.pairs.J, j.pairs.I] = curv
            H = H + Hc
        return E, g, 0.5 * (H + H.T)

    def minimize(self, z0, cfg: SolverConfig, qbar=None, f_ext=None, quasistatic=False):
        dt = cfg.dt
        if cfg.method == "lbfgs":
            return lbfgs_minimize(lambda z: self.objective(z, qbar, dt, f_ext, quasistatic), z0, cfg)
        return projective_newton_minimize(lambda z: self.objective_hessian(z, qbar, dt, f_ext, quasistatic), z0, cfg)


def inertial_guess(state: SimState, f_ext, mass: MassMatrix, dt: float) -> np.ndarray:
    return state.q + dt * state.v + dt * dt * f_ext / mass.diag


def initial_state(system: ReducedSystem, q0=None, z0=None) -> SimState:
    """Reduced state at ``z0``, or at the encoding of ``q0`` (rest by default)."""
    if z0 is None:
        if q0 is None:
            q0 = system.potential.mesh.rest_q
        z0 = encode(system.model, q0) if system.model.supervised else np.zeros(system.model.r)
    z0 = np.asarray(z0, dtype=float)
    q = decode(system.model, z0)
    return SimState(q, np.zeros_like(q), z0, 0.0)


def step(system: ReducedSystem, state: SimState, frame: Frame, cfg: SolverConfig, quasistatic: bool = False):
    """Advance one step from a warm start at ``state.z``."""
    sys_ = system.with_pins(frame.pin_values) if frame.pin_values is not None else system
    if quasistatic:
        z, rep = sys_.minimize(state.z, cfg, None, frame.f_ext, quasistatic=True)
        q = decode(sys_.model, z)
        return SimState(q, np.zeros_like(q), z, state.t + cfg.dt), rep
    qbar = inertial_guess(state, frame.f_ext, system.mass, cfg.dt)
    z, rep = sys_.minimize(state.z, cfg, qbar)
    q = decode(sys_.model, z)
    v = (q - state.q) / cfg.dt
    return SimState(q, v, z, state.t + cfg.dt), rep
