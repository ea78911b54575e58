import json

import numpy as np
import pytest
from scipy.optimize import minimize

from lipsub.errors import FormatError
from lipsub.full_solver import (
    full_minimize,
    full_objective,
    full_step,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from lipsub.scenario import scenario_from_dict
from lipsub.solver import CONVERGED, Frame, SimState, SolverConfig

from conftest import central_fd, rel_err


def tiny_scenario(**over):
    d = {
        "id": "tiny",
        "mesh": {"generator": "bar_2d", "nx": 4, "ny": 2, "length": 1.0, "height": 0.25},
        "material": {"mu": 50.0, "lambda": 80.0, "density": 1.0},
        "pins": {"x_max": 1e-9},
        "gravity": [0.0, -1.0],
        "dt": 0.05,
        "interactions": {"episodes": 3, "steps": 6, "force_range": [0.5, 1.0], "patch_radius": 0.3,
                         "duration_range": [2, 3], "rest_range": [1, 2]},
        "replay": {"steps": 5, "seed": 7},
    }
    d.update(over)
    return scenario_from_dict(d)


def test_zero_force_from_rest_is_stationary():
    sc = tiny_scenario(gravity=[0.0, 0.0])
    state = SimState(sc.mesh.rest_q.copy(), np.zeros(sc.n))
    new, rep = full_step(sc.potential(), sc.mass(), state, Frame(np.zeros(sc.n)), SolverConfig(epsilon=1e-8))
    assert rep.code == CONVERGED and rep.iterations == 0
    assert np.array_equal(new.q, state.q)


def test_full_objective_gradient_fd():
    sc = tiny_scenario()
    pot, mass = sc.potential(), sc.mass()
    rng = np.random.default_rng(0)
    q = sc.mesh.rest_q + 0.01 * rng.standard_normal(sc.n)
    qbar = sc.mesh.rest_q + 0.01 * rng.standard_normal(sc.n)
    _, g, _ = full_objective(pot, mass, q, qbar, 0.05)
    fd = central_fd(lambda x: full_objective(pot, mass, x, qbar, 0.05)[0], q, 1e-6)
    assert rel_err(g, fd) < 1e-6


def test_single_tet_against_dense_oracle():
    from lipsub.mesh import MaterialParams, build_mesh
    from lipsub.scenario import Interactions, Scenario

    mesh = build_mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]]), np.array([[0, 1, 2, 3]]),
                      pinned=[0, 1, 2])
    sc = Scenario("tet", mesh, MaterialParams(10.0, 20.0, 1.0), np.zeros(3), (), 0.05, False, Interactions(), {})
    pot, mass = sc.potential(), sc.mass()
    f = np.array([0.3, -0.2, 0.5])
    qbar = mesh.rest_q + 0.05 ** 2 * f / mass.diag
    q, rep = full_minimize(pot, mass, mesh.rest_q, SolverConfig(epsilon=1e-10, dt=0.05), qbar)
    assert rep.code == CONVERGED

    def obj(x):
        E, g, _ = full_objective(pot, mass, x, qbar, 0.05)
        return E, g

    ref = minimize(obj, mesh.rest_q, jac=True, method="BFGS", options={"gtol": 1e-13, "maxiter": 500})
    assert np.abs(q - ref.x).max() < 1e-8


def test_zero_interaction_dataset_is_rest():
    sc = tiny_scenario(gravity=[0.0, 0.0], interactions={"episodes": 2, "steps": 4, "force_range": [0.0, 0.0]})
    ds = generate_dataset(sc, SolverConfig(epsilon=1e-8), seed=0)
    assert len(ds) == 8
    assert np.array_equal(ds.snapshots, np.tile(sc.mesh.rest_q, (8, 1)))


def test_dataset_deterministic_and_round_trip(tmp_path):
    sc = tiny_scenario()
    cfg = SolverConfig(epsilon=1e-6, max_iters=100)
    a = generate_dataset(sc, cfg, seed=3)
    b = generate_dataset(sc, cfg, seed=3)
    assert np.array_equal(a.snapshots, b.snapshots)
    assert not np.array_equal(a.snapshots, generate_dataset(sc, cfg, seed=4).snapshots)
    save_dataset(a, tmp_path / "ds")
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert manifest["frames"] == len(a) == sum(e["frames"] for e in manifest["provenance"]["episodes"])
    back = load_dataset(tmp_path / "ds")
    assert np.array_equal(back.snapshots, a.snapshots)
    train, held = back.split(4)
    assert len(train) + len(held) == len(a) and len(held) == len(a) // 4


def test_dataset_corrupt(tmp_path):
    sc = tiny_scenario(interactions={"episodes": 1, "steps": 2, "force_range": [0.0, 0.0]})
    ds = generate_dataset(sc, SolverConfig(), seed=0)
    save_dataset(ds, tmp_path / "ds")
    blob = tmp_path / "ds" / "snapshots.f64"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(FormatError, match="manifest expects"):
        load_dataset(tmp_path / "ds")
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "missing")
