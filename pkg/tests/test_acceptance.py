"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION <k> PASS|FAIL`` line; the lines are
repeated in the terminal summary. The bar fixture runs the real CLI
(gen-data, then train for three seeds) with ``configs/bar2d.json``.
"""

import os
import shutil
import time

import numpy as np
import pytest

from lipsub import tape as T
from lipsub import diagnostics as dg
from lipsub.cli import RunConfig, main
from lipsub.cubature import CubatureSet, cubature_error, fit_cubature, load_cubature
from lipsub.energy import Potential
from lipsub.full_solver import load_dataset
from lipsub.mesh import MaterialParams, bar_2d, bar_3d, build_mesh, cloth_grid, lump_mass
from lipsub.network import decode, decode_jacobian, decode_jet, decode_second_directional, encode, init_model, \
    load_checkpoint
from lipsub.reduced import ReducedPotential
from lipsub.solver import CONVERGED, ReducedSystem, SolverConfig
from lipsub.training import lipschitz_loss, reconstruction_loss, sample_pullback, unsupervised_loss

import conftest
from conftest import central_fd, rel_err

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
BAR_CONFIG = os.path.join(ROOT, "configs", "bar2d.json")
TINY_CONFIG = os.path.join(os.path.dirname(__file__), "data", "cli_tiny.json")
SEEDS = (0, 1, 2)


def report(k, ok, detail):
    line = f"CRITERION {k} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    conftest.ACCEPTANCE.append(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. derivative correctness over 100 seeds


def _energy_checks(rng):
    """Assembled gradient/Hessian FD on a bar, a tet block and a bending cloth with contact."""
    from lipsub.energy import HalfSpace, Sphere

    cases = [
        (bar_2d(2, 1, 1.0, 0.5, pinned=[0]), MaterialParams(3.0, 5.0, 1.0), ()),
        (bar_3d(1, 1, 1, (1.0, 1.0, 1.0), pinned=[0]), MaterialParams(2.0, 4.0, 1.0), ()),
        (cloth_grid(2, 1, 1.0, 0.5, pinned=[0]), MaterialParams(2.0, 3.0, 1.0, bend_stiffness=0.5,
                                                                  contact_stiffness=50.0, contact_margin=0.05),
         (HalfSpace(np.array([0.0, 0.0, 1.0]), 0.02), Sphere(np.array([0.5, 0.2, -0.9]), 0.93))),
    ]
    worst_g = worst_h = 0.0
    for mesh, mat, sdfs in cases:
        pot = Potential(mesh, mat, sdfs)
        q = mesh.rest_q + 0.05 * rng.standard_normal(mesh.n_dofs)
        a = pot.assemble(q, want_hessian=True)
        g_fd = central_fd(lambda x: pot.assemble(x).value, q, 1e-6)
        H_fd = central_fd(lambda x: pot.assemble(x).gradient, q, 1e-6)
        worst_g = max(worst_g, rel_err(a.gradient, g_fd))
        worst_h = max(worst_h, rel_err(a.hessian.toarray(), H_fd))
    return worst_g, worst_h


def _param_fd(loss_fn, model, rng, h=1e-4, picks=2):
    params = [np.array(p) for p in model.params()]
    grads = T.LossTape(lambda p: loss_fn(model.bind(p)), params).gradient()
    worst = 0.0
    for k in rng.choice(len(params), size=3, replace=False):
        p = params[k]
        for i in rng.integers(p.size, size=picks):
            vals = []
            for s in (h, -h):
                q = [a.copy() for a in params]
                q[k].flat[i] += s
                vals.append(float(loss_fn(model.bind(q))))
            fd = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, abs(grads[k].flat[i] - fd) / max(abs(fd), 1.0))
    return worst


def test_criterion_1_derivatives():
    t0 = time.perf_counter()
    mesh = bar_2d(3, 1, 1.0, 0.4, pinned=[0, 4])
    mat = MaterialParams(5.0, 8.0, 1.0)
    pot, mass = Potential(mesh, mat), lump_mass(mesh, mat)
    n = mesh.n_dofs
    rp = ReducedPotential(pot)
    worst = dict(energy_g=0.0, energy_h=0.0, red_g=0.0, red_h=0.0, jac=0.0, dir2=0.0, theta=0.0)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        if seed % 10 == 0:
            g, h = _energy_checks(rng)
            worst["energy_g"] = max(worst["energy_g"], g)
            worst["energy_h"] = max(worst["energy_h"], h)
        m = init_model(3, n, [6, 6], True, seed, mesh.rest_q, np.full(n, 0.05))
        m = m.bind([p + (0.1 * rng.standard_normal(p.shape) if p.ndim == 1 else 0) for p in m.params()]).copy()
        z = 0.5 * rng.standard_normal(3)
        sys_ = ReducedSystem(pot, mass, m)
        qbar = decode(m, z) + 0.01 * rng.standard_normal(n)
        _, g = sys_.objective(z, qbar)
        worst["red_g"] = max(worst["red_g"], rel_err(g, central_fd(lambda x: sys_.objective(x, qbar)[0], z, 1e-6)))
        _, _, H = sys_.objective_hessian(z, qbar)
        worst["red_h"] = max(worst["red_h"], rel_err(H, central_fd(lambda x: sys_.objective(x, qbar)[1], z, 1e-5)))
        worst["jac"] = max(worst["jac"], rel_err(decode_jacobian(m, z), central_fd(lambda x: decode(m, x), z, 1e-5)))
        u, v = rng.standard_normal((2, 3))
        h = 1e-5
        fd2 = (decode_jacobian(m, z + h * v) - decode_jacobian(m, z - h * v)) @ u / (2 * h)
        worst["dir2"] = max(worst["dir2"], rel_err(decode_second_directional(m, z, u, v), fd2))
        batch = mesh.rest_q + 0.03 * rng.standard_normal((2, n))
        zz = rng.standard_normal((2, 3)) * 0.5
        z1, z2 = rng.standard_normal((2, 2, 3)) * 0.5
        order = seed % 3
        for fn in (lambda mm: reconstruction_loss(mm, batch, mass),
                   lambda mm: unsupervised_loss(mm, zz, pot, mass, 1.0, 1.0),
                   lambda mm: lipschitz_loss(mm, z1, z2, order, rp)):
            worst["theta"] = max(worst["theta"], _param_fd(fn, m, rng))
    elapsed = time.perf_counter() - t0
    limits = dict(energy_g=1e-6, energy_h=1e-4, red_g=1e-6, red_h=1e-4, jac=1e-6, dir2=1e-5, theta=1e-4)
    ok = all(worst[k] < limits[k] for k in limits) and elapsed < 120
    report(1, ok, "100 seeds, worst " + ", ".join(f"{k}={worst[k]:.1e}" for k in limits) + f", {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 2. Lipschitz loss against a brute-force oracle


def _brute_derivatives(model, pot, z, order):
    """Per-sample reduced derivatives from the full-space assembly and decoder directional derivatives."""
    q = decode(model, z)
    a = pot.assemble(q, want_hessian=order == 2)
    if order == 0:
        return np.array([a.value])
    J = decode_jacobian(model, z)
    if order == 1:
        return J.T @ a.gradient
    r = z.size
    H = J.T @ (a.hessian @ J)
    E = np.eye(r)
    for i in range(r):
        for j in range(r):
            H[i, j] += a.gradient @ decode_second_directional(model, z, E[i], E[j])
    return H.ravel()


def test_criterion_2_lipschitz_oracle():
    t0 = time.perf_counter()
    mesh = bar_2d(5, 2, 1.0, 0.4, pinned=[0, 6, 12])
    mat = MaterialParams(5.0, 8.0, 1.0)
    pot = Potential(mesh, mat)
    assert pot.n_elements == 20
    cub = CubatureSet.full(pot.n_terms)
    rp = ReducedPotential(pot, cub)
    worst = 0.0
    for batch in range(50):
        rng = np.random.default_rng(1000 + batch)
        m = init_model(3, mesh.n_dofs, [8], False, batch, mesh.rest_q, np.full(mesh.n_dofs, 0.05))
        z1, z2 = 0.5 * rng.standard_normal((2, 4, 3))
        for order in (0, 1, 2):
            got = float(lipschitz_loss(m, z1, z2, order, rp))
            terms = []
            for a, b in zip(z1, z2):
                d = _brute_derivatives(m, pot, a, order) - _brute_derivatives(m, pot, b, order)
                terms.append(float(d @ d) / float((a - b) @ (a - b)))
            ref = float(np.mean(terms))
            worst = max(worst, abs(got - ref) / abs(ref))
    elapsed = time.perf_counter() - t0
    report(2, worst < 1e-8 and elapsed < 60, f"50 batches x orders 0/1/2, worst rel {worst:.1e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# bar pipeline shared by criteria 3, 4, 5, 7, 8


class BarRun:
    def __init__(self, root):
        self.root = root
        self.cfg = RunConfig.load(BAR_CONFIG)
        self.sc = self.cfg.scenario()
        self.pot, self.mass = self.sc.potential(), self.sc.mass()
        self.frames = self.sc.replay_frames(self.mass)
        full = load_dataset(os.path.join(root, "data", "dataset"))
        self.train, self.heldout = full.split(int(self.cfg.section("data")["holdout_every"]))
        self._eval = {}

    def model(self, seed, name):
        return load_checkpoint(os.path.join(self.root, f"seed{seed}", f"{name}.ckpt"))

    def cubature(self, seed):
        return load_cubature(os.path.join(self.root, f"seed{seed}", "cubature.json"))

    def solver(self, **over):
        return self.cfg.solver(self.sc, **over)

    def replay(self, model, cubature=None, **over):
        return dg.simulate_reduced(ReducedSystem(self.pot, self.mass, model, cubature), self.frames,
                                   self.solver(**over), self.sc.quasistatic)

    def evaluate(self, seed, name):
        key = (seed, name)
        if key not in self._eval:
            m = self.model(seed, name)
            traj = self.replay(m)
            self._eval[key] = {
                "lip2": dg.estimate_lipschitz(m, self.pot, 2, 64, seed=0, dataset=self.train),
                "iters": float(np.mean([r.iterations for r in traj.reports])),
                "codes": sorted({r.code for r in traj.reports}),
                "traj": traj,
                "recon": float(np.mean(dg.reconstruction_errors(m, self.heldout.snapshots, self.sc.mesh.dim))),
            }
        return self._eval[key]


@pytest.fixture(scope="module")
def bar(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("bar"))
    assert main(["gen-data", "--config", BAR_CONFIG, "--out", os.path.join(root, "data")]) == 0
    for seed in SEEDS:
        assert main(["train", "--config", BAR_CONFIG, "--seed", str(seed), "--out", os.path.join(root, f"seed{seed}"),
                     "--dataset", os.path.join(root, "data", "dataset")]) == 0
    return BarRun(root)


def test_criterion_3_regularization_effect(bar):
    passed, parts = 0, []
    for seed in SEEDS:
        o, v = bar.evaluate(seed, "ours"), bar.evaluate(seed, "vanilla")
        lip_ratio = v["lip2"] / o["lip2"]
        it_ratio = v["iters"] / o["iters"]
        ok = lip_ratio >= 1.5 and it_ratio >= 1.2
        passed += ok
        parts.append(f"seed {seed}: Lip2 x{lip_ratio:.2f}, iters {v['iters']:.2f}->{o['iters']:.2f} "
                     f"(x{it_ratio:.2f}) {'ok' if ok else 'miss'}")
    report(3, passed >= 2, f"{passed}/3 seeds; " + "; ".join(parts))


def test_criterion_4_manifold_preservation(bar):
    dim = bar.sc.mesh.dim
    ok_all, parts = True, []
    for seed in SEEDS:
        o, v = bar.evaluate(seed, "ours"), bar.evaluate(seed, "vanilla")
        ours_states = np.array([s.q for s in o["traj"].states])[::5]
        van_states = np.array([s.q for s in v["traj"].states])[::5]
        on_vanilla = dg.projection_error(bar.model(seed, "vanilla"), ours_states, bar.mass, dim).errors.mean()
        on_ours = dg.projection_error(bar.model(seed, "ours"), van_states, bar.mass, dim).errors.mean()
        limit = 2.0 * v["recon"]
        ok = on_vanilla <= limit and on_ours <= limit
        ok_all &= ok
        parts.append(f"seed {seed}: {on_vanilla:.2e}/{on_ours:.2e} vs 2x recon {limit:.2e}")
    report(4, ok_all, "; ".join(parts))


def test_criterion_5_cubature_quality(bar):
    model = bar.model(0, "stage1")
    pot = bar.pot
    n_el = pot.n_elements
    rng = np.random.default_rng(0)
    held_z = encode(model, bar.heldout.snapshots)
    held_z = held_z[rng.permutation(held_z.shape[0])[:64]]
    errs, sets = {}, {}
    for frac in (0.05, 0.15):
        target = max(1, int(round(frac * n_el)))
        z = sample_pullback(model, "supervised", bar.train, np.random.default_rng(1), 10 * target)
        cub = fit_cubature(model, pot, z, target)
        errs[frac] = cubature_error(cub, model, pot, held_z)["gradient"]
        sets[frac] = cub
    monotone = all(np.all(np.diff(c.residual_history) <= 0) for c in sets.values())
    nonneg = all(np.all(c.weights >= 0) for c in sets.values())
    ok = errs[0.15] <= 0.20 and errs[0.15] < errs[0.05] and monotone and nonneg
    report(5, ok, f"held-out gradient error S=15% {errs[0.15]:.3f} ({sets[0.15].size} terms), "
                  f"S=5% {errs[0.05]:.3f} ({sets[0.05].size} terms), weights>=0 {nonneg}, monotone {monotone}")


def test_criterion_6_exit_bookkeeping(bar, tmp_path):
    models = {"ours": bar.model(0, "ours"), "vanilla": bar.model(0, "vanilla")}
    recs = dg.run_benchmark(bar.sc, models, epsilons=(1e-4, 1e-5, 1e-6), methods=("lbfgs",),
                            base_cfg=bar.solver())
    rows = dg.bench_rows(recs)
    sums_ok = all(abs(sum(row[6:10]) - 100.0) < 1e-9 for row in rows)
    exit_ok = all(rep.final_grad_inf_norm < r.epsilon for r in recs for rep in r.reports if rep.code == CONVERGED)
    grid_ok = {(r.variant, r.epsilon) for r in recs} == {(v, e) for v in models for e in (1e-4, 1e-5, 1e-6)}
    path = tmp_path / "bench.csv"
    dg.write_csv(path, dg.BENCH_COLUMNS, rows)
    header_ok = path.read_text().splitlines()[0] == ",".join(dg.BENCH_COLUMNS)
    # byte-for-byte golden run on a tiny scenario
    from test_diagnostics import GOLDEN, golden_run

    bench, steps = golden_run()
    with open(os.path.join(GOLDEN, "bench_tiny.csv")) as fh, open(os.path.join(GOLDEN, "steps_tiny.csv")) as gh:
        golden_ok = bench == fh.read() and steps == gh.read()
    ok = sums_ok and exit_ok and grid_ok and header_ok and golden_ok
    report(6, ok, f"{len(rows)} rows; pct sums {sums_ok}, code-I grad<eps {exit_ok}, grid {grid_ok}, "
                  f"header {header_ok}, golden {golden_ok}")


def test_criterion_7_solver_parity(bar):
    m = bar.model(0, "ours")
    a = bar.replay(m, method="lbfgs")
    b = bar.replay(m, method="projective_newton")
    ia = np.array([r.iterations for r in a.reports])
    ib = np.array([r.iterations for r in b.reports])
    codes_a, codes_b = sorted({r.code for r in a.reports}), sorted({r.code for r in b.reports})
    frac = float(np.mean(ib <= ia))
    ok = codes_a == ["I"] and codes_b == ["I"] and frac >= 0.9
    report(7, ok, f"exits L-BFGS {codes_a}, Newton {codes_b}; Newton <= L-BFGS on {100 * frac:.1f}% of steps "
                  f"(mean {ib.mean():.2f} vs {ia.mean():.2f})")


def test_criterion_8_runtime_cubature(bar):
    m = bar.model(0, "ours")
    plain = bar.evaluate(0, "ours")["traj"]
    full = bar.replay(m, CubatureSet.full(bar.pot.n_terms))
    identical = all(np.array_equal(x.q, y.q) for x, y in zip(full.states, plain.states))
    cub = bar.cubature(0)
    approx = bar.replay(m, cub)
    dev = np.linalg.norm((approx.states[-1].q - plain.states[-1].q).reshape(-1, bar.sc.mesh.dim), axis=1).max()
    ratio = dev / bar.sc.mesh.bbox_diagonal()
    report(8, identical and ratio <= 0.05, f"full set bit-identical {identical}; S={cub.size} endpoint deviation "
                                           f"{100 * ratio:.2f}% of bbox diagonal")


def test_reduced_gravity_settles(bar):
    m = bar.model(0, "ours")
    frames = [type(f)(bar.sc.gravity_force(bar.mass), f.pin_values) for f in bar.frames[:100]]
    traj = dg.simulate_reduced(ReducedSystem(bar.pot, bar.mass, m), frames, bar.solver())
    assert np.abs(traj.states[-1].v).max() < 1e-4


# ---------------------------------------------------------------------------
# 9. determinism of CLI reruns


def _tracked_files(run):
    out = {}
    for dirpath, _, files in os.walk(run):
        for f in files:
            rel = os.path.relpath(os.path.join(dirpath, f), run)
            if rel in ("metrics.jsonl", "timings.csv"):
                continue  # wall-clock logs, listed as untracked in the manifest
            with open(os.path.join(dirpath, f), "rb") as fh:
                out[rel] = fh.read()
    return out


def test_criterion_9_determinism(tmp_path):
    runs = []
    for k in range(2):
        out = str(tmp_path / f"run{k}")
        assert main(["pipeline", "--config", TINY_CONFIG, "--out", out]) == 0
        assert main(["simulate", "--config", TINY_CONFIG, "--out", out, "--model", os.path.join(out, "ours.ckpt"),
                     "--steps", "10"]) == 0
        runs.append(_tracked_files(out))
    same = runs[0].keys() == runs[1].keys() and all(runs[0][k] == runs[1][k] for k in runs[0])
    kinds = sorted({os.path.splitext(k)[1] for k in runs[0]})
    have = all(any(k.endswith(ext) for k in runs[0]) for ext in (".json", ".ckpt", ".csv"))
    report(9, same and have, f"{len(runs[0])} tracked files byte-identical across reruns: {same} ({', '.join(kinds)})")
