import numpy as np
import pytest
from scipy.optimize import nnls

from lipsub.cubature import (
    CubatureSet,
    build_training_matrix,
    cubature_error,
    fit_cubature,
    load_cubature,
    per_term_reduced_gradients,
    save_cubature,
    select_cubatures,
)
from lipsub.energy import Potential
from lipsub.errors import FormatError, NumericError
from lipsub.mesh import bar_2d
from lipsub.network import decode_jet, init_model
from lipsub.reduced import ReducedPotential


def model_for(mesh, seed=0, r=3):
    rng = np.random.default_rng(seed)
    m = init_model(r, mesh.n_dofs, [8, 8], False, seed, mesh.rest_q, np.full(mesh.n_dofs, 0.05))
    return m.bind([p + (0.1 * rng.standard_normal(p.shape) if p.ndim == 1 else 0) for p in m.params()]).copy()


@pytest.fixture
def bar20(mat):
    mesh = bar_2d(5, 2, 1.0, 0.4, pinned=[0, 6, 12])
    return mesh, Potential(mesh, mat), model_for(mesh)


def test_columns_sum_to_reduced_gradient(bar20):
    mesh, pot, m = bar20
    z = np.array([0.3, -0.2, 0.5])
    cols = per_term_reduced_gradients(m, pot, z)
    j = decode_jet(m, z, order=1)
    ref = np.asarray(j.d) @ pot.assemble(np.asarray(j.v)).gradient
    assert np.allclose(cols.sum(axis=1), ref, rtol=1e-12, atol=1e-14)
    A, b = build_training_matrix(m, pot, np.random.default_rng(0).standard_normal((4, 3)))
    assert A.shape == (12, pot.n_terms)
    assert np.array_equal(b, A @ np.ones(pot.n_terms))


def test_single_term_gives_unit_weight():
    A = np.array([[1.0], [2.0]])
    cub = select_cubatures(A, A @ np.ones(1), target_S=5)
    assert cub.size == 1 and np.isclose(cub.weights[0], 1.0) and cub.fit_error < 1e-14


def test_exact_single_column_recovery():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((30, 10))
    b = 2.5 * A[:, 4]
    cub = select_cubatures(A, b, target_S=1)
    assert cub.element_ids.tolist() == [4] and np.isclose(cub.weights[0], 2.5) and cub.fit_error < 1e-12


def test_residual_monotone_and_weights_nonnegative(bar20):
    _, pot, m = bar20
    A, b = build_training_matrix(m, pot, np.random.default_rng(2).standard_normal((20, 3)))
    cub = select_cubatures(A, b, target_S=10)
    h = np.array(cub.residual_history)
    assert np.all(np.diff(h) <= 0) and h[0] == 1.0
    assert np.all(cub.weights > 0) and cub.size <= 10


def test_weights_match_independent_nnls(bar20):
    _, pot, m = bar20
    A, b = build_training_matrix(m, pot, np.random.default_rng(3).standard_normal((20, 3)))
    cub = select_cubatures(A, b, target_S=8)
    w_ref, _ = nnls(A[:, cub.element_ids], b)
    assert np.abs(cub.weights - w_ref).max() <= 1e-8 * max(1.0, np.abs(w_ref).max())


def test_target_error_stops_early(bar20):
    _, pot, m = bar20
    A, b = build_training_matrix(m, pot, np.random.default_rng(4).standard_normal((20, 3)))
    cub = select_cubatures(A, b, target_error=0.5)
    assert cub.fit_error <= 0.5 and cub.size < pot.n_terms


def test_bad_inputs():
    with pytest.raises(NumericError):
        select_cubatures(np.array([[np.nan]]), np.ones(1), target_S=1)
    with pytest.raises(ValueError):
        select_cubatures(np.ones((2, 2)), np.ones(2))
    with pytest.raises(ValueError):
        CubatureSet([0, 1], [1.0, -1.0])
    with pytest.raises(ValueError):
        CubatureSet([2, 2], [1.0, 1.0])
    assert select_cubatures(np.ones((2, 2)), np.zeros(2), target_S=1).size == 0


def test_error_full_and_empty(bar20):
    _, pot, m = bar20
    z = np.random.default_rng(5).standard_normal((6, 3))
    full = cubature_error(CubatureSet.full(pot.n_terms), m, pot, z)
    assert full == {"gradient": 0.0, "hessian": 0.0, "lipschitz": 0.0}
    empty = cubature_error(CubatureSet([], []), m, pot, z)
    assert empty["gradient"] == 1.0 and empty["hessian"] == 1.0 and empty["lipschitz"] == 1.0


def test_full_subset_bit_identical(bar20):
    _, pot, m = bar20
    z = np.random.default_rng(6).standard_normal((3, 3))
    a = ReducedPotential(pot).derivatives(m, z, 2)
    b = ReducedPotential(pot, CubatureSet.full(pot.n_terms)).derivatives(m, z, 2)
    assert np.array_equal(a.value, b.value) and np.array_equal(a.gradient, b.gradient)
    assert np.array_equal(a.hessian, b.hessian)


def test_larger_set_has_lower_hessian_error(mat):
    mesh = bar_2d(5, 2, 1.0, 0.4, pinned=[0, 6, 12])
    pot = Potential(mesh, mat)
    assert pot.n_elements == 20
    m = model_for(mesh, 7)
    rng = np.random.default_rng(7)
    train, held = rng.standard_normal((40, 3)), rng.standard_normal((16, 3))
    small = fit_cubature(m, pot, train, 2)
    large = fit_cubature(m, pot, train, 10)
    assert cubature_error(large, m, pot, held)["hessian"] < cubature_error(small, m, pot, held)["hessian"]


def test_save_load(tmp_path):
    cub = CubatureSet([5, 1, 3], [0.5, 1.0, 2.0], 0.1, [1.0, 0.5, 0.1], "ab" * 32)
    save_cubature(cub, tmp_path / "c.json")
    back = load_cubature(tmp_path / "c.json")
    assert back.element_ids.tolist() == [1, 3, 5] and back.weights.tolist() == [1.0, 2.0, 0.5]
    assert back.to_dict() == cub.to_dict()
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(FormatError):
        load_cubature(tmp_path / "bad.json")
    (tmp_path / "broken.json").write_text("{\n  oops")
    with pytest.raises(FormatError):
        load_cubature(tmp_path / "broken.json")
