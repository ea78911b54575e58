"""Scenario JSON: mesh, material, pins, obstacles and the interaction distribution.

Example::

    {
      "id": "bar2d",
      "mesh": {"generator": "bar_2d", "nx": 20, "ny": 4, "length": 1.0, "height": 0.2},
      "material": {"mu": 770.0, "lambda": 1150.0, "density": 0.1},
      "pins": {"x_max": 1e-9},
      "gravity": [0.0, -9.8],
      "sdfs": [],
      "dt": 0.05,
      "quasistatic": false,
      "interactions": {"episodes": 8, "steps": 60, "force_range": [0.2, 3.0],
                       "patch_radius": 0.15, "duration_range": [5, 15], "rest_range": [3, 10]},
      "replay": {"steps": 200, "seed": 1234}
    }

Interaction forces are total forces (N) spread uniformly over the free
vertices of a disc/ball patch around a random free vertex. A timeline
alternates a pulse (random patch, direction, magnitude, duration) with a
release interval. Pinned vertices may translate with ``pin_motion``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .energy import Potential, sdf_from_dict
from .errors import ConfigError
from .mesh import MaterialParams, Mesh, bar_2d, bar_3d, cloth_grid, load_mesh, lump_mass, select_vertices
from .solver import Frame

_GENERATORS = {"bar_2d": bar_2d, "bar_3d": bar_3d, "cloth_grid": cloth_grid}


@dataclass
class Interactions:
    episodes: int = 0
    steps: int = 0
    force_range: tuple = (0.0, 0.0)
    patch_radius: float = 0.1
    duration_range: tuple = (1, 1)
    rest_range: tuple = (1, 1)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "Interactions":
        d = dict(d or {})
        out = cls(
            episodes=int(d.get("episodes", 0)),
            steps=int(d.get("steps", 0)),
            force_range=tuple(float(x) for x in d.get("force_range", (0.0, 0.0))),
            patch_radius=float(d.get("patch_radius", 0.1)),
            duration_range=tuple(int(x) for x in d.get("duration_range", (1, 1))),
            rest_range=tuple(int(x) for x in d.get("rest_range", d.get("duration_range", (1, 1)))),
        )
        if out.force_range[0] < 0 or out.force_range[1] < out.force_range[0]:
            raise ConfigError("interactions.force_range must be [min, max] with 0 <= min <= max")
        if min(out.duration_range) < 1 or min(out.rest_range) < 0:
            raise ConfigError("interaction durations must be >= 1 step")
        return out


@dataclass
class Scenario:
    id: str
    mesh: Mesh
    material: MaterialParams
    gravity: np.ndarray
    sdfs: tuple
    dt: float
    quasistatic: bool
    interactions: Interactions
    replay: dict
    pin_motion: Optional[dict] = None
    raw: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.mesh.n_dofs

    def potential(self, pin_values=None) -> Potential:
        return Potential(self.mesh, self.material, self.sdfs, pin_values)

    def mass(self):
        return lump_mass(self.mesh, self.material)

    def gravity_force(self, mass=None) -> np.ndarray:
        mass = mass or self.mass()
        g = np.tile(self.gravity, self.mesh.free.size)
        return mass.diag * g

    def pin_values_at(self, t: float) -> Optional[np.ndarray]:
        if not self.pin_motion:
            return None
        vel = np.asarray(self.pin_motion.get("velocity", [0.0] * self.mesh.dim), dtype=float)
        duration = float(self.pin_motion.get("duration", np.inf))
        return self.mesh.rest_pin_values + vel * min(t, duration)

    def frames(self, seed: int, steps: int, mass=None) -> List[Frame]:
        """Seeded interaction timeline of ``steps`` frames."""
        mass = mass or self.mass()
        rng = np.random.default_rng(seed)
        mesh = self.mesh
        fg = self.gravity_force(mass)
        it = self.interactions
        forces = [fg.copy() for _ in range(steps)]
        free_pos = mesh.vertices[mesh.free]
        k = 0
        while k < steps and it.force_range[1] > 0:
            centre = free_pos[rng.integers(free_pos.shape[0])]
            patch = np.flatnonzero(np.linalg.norm(free_pos - centre, axis=1) <= it.patch_radius)
            direction = rng.standard_normal(mesh.dim)
            direction /= np.linalg.norm(direction)
            magnitude = rng.uniform(*it.force_range)
            duration = int(rng.integers(it.duration_range[0], it.duration_range[1] + 1))
            rest = int(rng.integers(it.rest_range[0], it.rest_range[1] + 1))
            f = np.zeros((mesh.free.size, mesh.dim))
            f[patch] = direction * (magnitude / patch.size)
            f = f.ravel()
            for s in range(k, min(steps, k + duration)):
                forces[s] = forces[s] + f
            k += duration + rest
        out = []
        for s in range(steps):
            out.append(Frame(forces[s], self.pin_values_at((s + 1) * self.dt)))
        return out

    def replay_frames(self, mass=None) -> List[Frame]:
        return self.frames(int(self.replay.get("seed", 0)), int(self.replay.get("steps", 200)), mass)


def _build_mesh(spec: dict, base_dir: str) -> Mesh:
    spec = dict(spec)
    if "generator" in spec:
        name = spec.pop("generator")
        if name not in _GENERATORS:
            raise ConfigError(f"unknown mesh generator {name!r}")
        if "size" in spec:
            spec["size"] = tuple(spec["size"])
        return _GENERATORS[name](**spec)
    if "path" in spec:
        path = spec["path"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return load_mesh(path, spec.get("format"), spec.get("dim"))
    raise ConfigError("mesh needs either 'generator' or 'path'")


def scenario_from_dict(d: dict, base_dir: str = ".") -> Scenario:
    try:
        mesh = _build_mesh(d["mesh"], base_dir)
        pins = d.get("pins", [])
        pinned = select_vertices(mesh, pins) if pins else np.zeros(0, dtype=np.int64)
        mesh = mesh.with_pins(pinned)
        mat = MaterialParams.from_dict(d["material"])
        gravity = np.asarray(d.get("gravity", [0.0] * mesh.dim), dtype=float)
        if gravity.shape != (mesh.dim,):
            raise ConfigError(f"gravity must have {mesh.dim} entries")
        sdfs = tuple(sdf_from_dict(s) for s in d.get("sdfs", []))
        dt = float(d.get("dt", 0.05))
        if not dt > 0:
            raise ConfigError("dt must be positive")
        return Scenario(
            id=str(d.get("id", "scenario")),
            mesh=mesh,
            material=mat,
            gravity=gravity,
            sdfs=sdfs,
            dt=dt,
            quasistatic=bool(d.get("quasistatic", False)),
            interactions=Interactions.from_dict(d.get("interactions")),
            replay=dict(d.get("replay", {"steps": 200, "seed": 0})),
            pin_motion=d.get("pin_motion"),
            raw=d,
        )
    except KeyError as exc:
        raise ConfigError(f"scenario is missing required key {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid scenario: {exc}") from None


def load_scenario(path) -> Scenario:
    if not os.path.exists(path):
        raise ConfigError(f"scenario file not found: {path}")
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return scenario_from_dict(d, os.path.dirname(os.path.abspath(path)))


def bar_scenario(**overrides) -> dict:
    """The reference 2D cantilever bar: 105 vertices, 160 triangles, 200 free DOFs."""
    d = {
        "id": "bar2d",
        "mesh": {"generator": "bar_2d", "nx": 20, "ny": 4, "length": 1.0, "height": 0.2},
        "material": {"mu": 770.0, "lambda": 1150.0, "density": 0.1},
        "pins": {"x_max": 1e-9},
        "gravity": [0.0, -9.8],
        "sdfs": [],
        "dt": 0.05,
        "quasistatic": False,
        "interactions": {
            "episodes": 8,
            "steps": 60,
            "force_range": [0.2, 3.0],
            "patch_radius": 0.15,
            "duration_range": [5, 15],
            "rest_range": [3, 10],
        },
        "replay": {"steps": 200, "seed": 1234},
    }
    d.update(overrides)
    return d
