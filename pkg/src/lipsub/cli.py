"""Command-line driver: ``lipsub <command> --config run.json --out DIR``.

The config is a JSON object with optional sections::

    {
      "scenario": "bar.json" | {...},
      "seed": 0,
      "data": {"epsilon": 1e-6, "max_iters": 100, "holdout_every": 5},
      "train": {...training options...},
      "solver": {"epsilon": 1e-5, "method": "lbfgs"},
      "bench": {"epsilons": [1e-4, 1e-5, 1e-6], "methods": ["lbfgs"], "runtime_cubature": "none"},
      "lipschitz": {"sample_count": 64, "orders": [0, 1, 2]}
    }

A file holding a bare scenario (it has a ``mesh`` key) is accepted as well.
Every command writes ``manifest-<command>.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from contextlib import nullcontext

import numpy as np
import scipy

from . import __version__
from .cubature import CubatureSet, cubature_error, fit_cubature, load_cubature, save_cubature
from .diagnostics import (
    BENCH_COLUMNS,
    STEP_COLUMNS,
    TIMING_COLUMNS,
    bench_rows,
    estimate_lipschitz,
    lipschitz_samples,
    projection_error,
    run_benchmark,
    simulate_reduced,
    step_rows,
    timing_rows,
    write_csv,
)
from .errors import ConfigError, FormatError, LipsubError, NumericError
from .full_solver import generate_dataset, load_dataset, save_dataset, simulate_full
from .network import checkpoint_bytes, file_sha256, init_model, load_checkpoint
from .scenario import Scenario, load_scenario, scenario_from_dict
from .solver import ReducedSystem, SolverConfig
from .training import TrainConfig, normalization_from_dataset, sample_pullback, train_variants

log = logging.getLogger("lipsub")

EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC, EXIT_OTHER = 2, 3, 4, 1

DATA_DEFAULTS = {"epsilon": 1e-6, "max_iters": 100, "holdout_every": 5}
BENCH_DEFAULTS = {"epsilons": [1e-4, 1e-5, 1e-6], "methods": ["lbfgs"], "runtime_cubature": "none"}
LIPSCHITZ_DEFAULTS = {"sample_count": 64, "orders": [0, 1, 2]}


# ---------------------------------------------------------------------------
# config handling


class RunConfig:
    def __init__(self, raw: dict, base_dir: str, seed_override=None):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        if "mesh" in raw:
            raw = {"scenario": raw}
        self.raw = raw
        self.base_dir = base_dir
        self.seed = int(seed_override if seed_override is not None else raw.get("seed", 0))

    @classmethod
    def load(cls, path, seed_override=None) -> "RunConfig":
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls(raw, os.path.dirname(os.path.abspath(path)), seed_override)

    def section(self, name, defaults=None) -> dict:
        out = dict(defaults or {})
        val = self.raw.get(name, {})
        if not isinstance(val, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        out.update(val)
        return out

    def path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def scenario(self) -> Scenario:
        spec = self.raw.get("scenario")
        if spec is None:
            raise ConfigError("config has no 'scenario'")
        if isinstance(spec, str):
            return load_scenario(self.path(spec))
        return scenario_from_dict(spec, self.base_dir)

    def solver(self, scenario: Scenario, **overrides) -> SolverConfig:
        d = self.section("solver")
        d.update({k: v for k, v in overrides.items() if v is not None})
        d.setdefault("dt", scenario.dt)
        try:
            return SolverConfig(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid solver options: {exc}") from None

    def train(self) -> TrainConfig:
        d = self.section("train")
        d["seed"] = self.seed
        try:
            return TrainConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"invalid training options: {exc}") from None

    def resolved(self) -> dict:
        d = dict(self.raw)
        if isinstance(d.get("scenario"), str):
            with open(self.path(d["scenario"])) as fh:
                d["scenario"] = json.load(fh)
        d["seed"] = self.seed
        return d

    def sha256(self) -> str:
        text = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _sha(path) -> str:
    return file_sha256(path)


def write_manifest(out_dir, command, cfg: RunConfig, outputs, inputs=None, untracked=(), extra=None, threads=None):
    """Deterministic run record: no timestamps, no absolute paths."""
    man = {
        "command": command,
        "config_sha256": cfg.sha256(),
        "config": cfg.resolved(),
        "seed": cfg.seed,
        "threads": threads,
        "versions": {"lipsub": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "inputs": inputs or {},
        "outputs": {os.path.relpath(p, out_dir): _sha(p) for p in outputs},
        "untracked_outputs": sorted(os.path.relpath(p, out_dir) for p in untracked),
    }
    if extra:
        man.update(extra)
    path = os.path.join(out_dir, f"manifest-{command}.json")
    with open(path, "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_model(path):
    return load_checkpoint(path)


def _input_record(path):
    if os.path.isdir(path):
        return _sha(os.path.join(path, "manifest.json"))
    return _sha(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig):
    sc = cfg.scenario()
    d = cfg.section("data", DATA_DEFAULTS)
    solver = cfg.solver(sc, epsilon=d["epsilon"], max_iters=d["max_iters"], method="projective_newton")
    ds = generate_dataset(sc, solver, cfg.seed)
    out = os.path.join(args.out, "dataset")
    save_dataset(ds, out)
    print(f"{len(ds)} frames written to {out}")
    return [os.path.join(out, "manifest.json"), os.path.join(out, "snapshots.f64")], {}, []


def cmd_train(args, cfg: RunConfig):
    sc = cfg.scenario()
    tc = cfg.train()
    pot, mass = sc.potential(), sc.mass()
    dataset = heldout = None
    inputs = {}
    if tc.mode == "supervised":
        dpath = args.dataset or os.path.join(args.out, "dataset")
        full = load_dataset(dpath)
        if full.n != sc.n:
            raise ConfigError(f"dataset has n = {full.n}, scenario {sc.id!r} has n = {sc.n}")
        dataset, heldout = full.split(int(cfg.section("data", DATA_DEFAULTS)["holdout_every"]))
        inputs["dataset"] = _input_record(dpath)
    shift, scale = normalization_from_dataset(dataset, sc.mesh.rest_q, tc.mode)
    model = init_model(tc.r, sc.n, tc.hidden, tc.mode == "supervised", tc.seed, shift, scale)
    os.makedirs(args.out, exist_ok=True)
    metrics = os.path.join(args.out, "metrics.jsonl")
    if os.path.exists(metrics):
        os.remove(metrics)
    res = train_variants(model, tc, dataset, pot, mass, metrics, args.out)
    outputs = [os.path.join(args.out, f"{n}.ckpt") for n in ("stage1", "ours", "vanilla")]
    if res.cubature is not None:
        cpath = os.path.join(args.out, "cubature.json")
        save_cubature(res.cubature, cpath)
        outputs.append(cpath)
    hist = os.path.join(args.out, "history.json")
    _dump_json(hist, res.history)
    outputs.append(hist)
    print(f"trained stage1/ours/vanilla into {args.out}")
    return outputs, inputs, [metrics]


def cmd_cubature(args, cfg: RunConfig):
    sc = cfg.scenario()
    tc = cfg.train()
    model = _load_model(args.model)
    pot = sc.potential()
    if model.n != sc.n:
        raise ConfigError(f"model has n = {model.n}, scenario {sc.id!r} has n = {sc.n}")
    frac = args.fraction if args.fraction is not None else tc.cubature_fraction
    target = max(1, int(round(frac * pot.n_terms)))
    if model.supervised and not args.dataset:
        raise ConfigError("a supervised model needs --dataset")
    dataset = load_dataset(args.dataset) if model.supervised else None
    holdout = int(cfg.section("data", DATA_DEFAULTS)["holdout_every"])
    train_ds, held = dataset.split(holdout) if dataset else (None, None)
    ss = np.random.SeedSequence(cfg.seed).spawn(2)
    mode = "supervised" if model.supervised else "unsupervised"
    zs = sample_pullback(model, mode, train_ds, np.random.default_rng(ss[0]), tc.cubature_samples_per_element * target)
    sha = hashlib.sha256(checkpoint_bytes(model)).hexdigest()
    cub = fit_cubature(model, pot, zs, target, sha)
    zh = sample_pullback(model, mode, held, np.random.default_rng(ss[1]), 64)
    err = cubature_error(cub, model, pot, zh)
    os.makedirs(args.out, exist_ok=True)
    cpath = os.path.join(args.out, "cubature.json")
    save_cubature(cub, cpath)
    epath = os.path.join(args.out, "cubature_error.json")
    _dump_json(epath, dict(err, size=cub.size, n_terms=pot.n_terms))
    print(f"cubature of {cub.size} terms; held-out gradient error {err['gradient']:.4f}")
    return [cpath, epath], {"model": _sha(args.model)}, []


def _runtime_cubature(spec, pot, cubature_path):
    if cubature_path:
        return load_cubature(cubature_path), "fitted"
    if spec in (None, "none"):
        return None, "none"
    if spec == "full":
        return CubatureSet.full(pot.n_terms), "full"
    raise ConfigError(f"runtime_cubature must be 'none' or 'full' (or pass --cubature), got {spec!r}")


def cmd_simulate(args, cfg: RunConfig):
    sc = cfg.scenario()
    mass = sc.mass()
    pot = sc.potential()
    frames = sc.replay_frames(mass)
    if args.steps is not None:
        frames = frames[: args.steps]
    inputs = {}
    if args.model:
        model = _load_model(args.model)
        if model.n != sc.n:
            raise ConfigError(f"model has n = {model.n}, scenario {sc.id!r} has n = {sc.n}")
        cub, _ = _runtime_cubature(cfg.section("bench", BENCH_DEFAULTS)["runtime_cubature"], pot, args.cubature)
        solver = cfg.solver(sc, method=args.method)
        traj = simulate_reduced(ReducedSystem(pot, mass, model, cub), frames, solver, sc.quasistatic)
        states, reports = traj.states, traj.reports
        inputs["model"] = _sha(args.model)
    else:
        solver = cfg.solver(sc, method="projective_newton", epsilon=cfg.section("data", DATA_DEFAULTS)["epsilon"])
        states, reports = simulate_full(sc, frames, solver)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "trajectory.jsonl")
    with open(path, "w") as fh:
        for k, (s, r) in enumerate(zip(states, reports)):
            row = dict(r.to_dict(timing=False), step=k, t=float(s.t), q=[float(x) for x in s.q])
            if s.z is not None:
                row["z"] = [float(x) for x in s.z]
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    codes = sorted({r.code for r in reports})
    print(f"{len(reports)} steps, exit codes {codes}")
    return [path], inputs, []


def _parse_models(specs, default_dir):
    models = {}
    for spec in specs or []:
        if "=" not in spec:
            raise ConfigError(f"--model expects NAME=PATH, got {spec!r}")
        name, path = spec.split("=", 1)
        models[name] = path
    if not models:
        models = {n: os.path.join(default_dir, f"{n}.ckpt") for n in ("ours", "vanilla")}
    for path in models.values():
        if not os.path.isfile(path):
            raise ConfigError(f"model checkpoint not found: {path}")
    return models


def cmd_bench(args, cfg: RunConfig):
    sc = cfg.scenario()
    b = cfg.section("bench", BENCH_DEFAULTS)
    paths = _parse_models(args.model, args.models_dir or args.out)
    models = {name: _load_model(p) for name, p in paths.items()}
    pot = sc.potential()
    cub, label = _runtime_cubature(b["runtime_cubature"], pot, args.cubature)
    count, dataset = 0, None
    if args.lipschitz:
        count = int(cfg.section("lipschitz", LIPSCHITZ_DEFAULTS)["sample_count"])
        if any(m.supervised for m in models.values()):
            if not args.dataset:
                raise ConfigError("--lipschitz with supervised models needs --dataset")
            dataset = load_dataset(args.dataset)
    records = run_benchmark(sc, models, b["epsilons"], b["methods"], cub, base_cfg=cfg.solver(sc),
                            lipschitz_count=count, lipschitz_dataset=dataset, seed=cfg.seed,
                            cubature_label=label)
    os.makedirs(args.out, exist_ok=True)
    bench = os.path.join(args.out, "bench.csv")
    steps = os.path.join(args.out, "steps.csv")
    timings = os.path.join(args.out, "timings.csv")
    write_csv(bench, BENCH_COLUMNS, bench_rows(records))
    write_csv(steps, STEP_COLUMNS, step_rows(records))
    write_csv(timings, TIMING_COLUMNS, timing_rows(records))
    for r in records:
        print(f"{r.variant:>10s} {r.method:>17s} eps={r.epsilon:g} mean_iters={r.mean_iterations:.3f} "
              f"exits={r.counts()}")
    return [bench, steps], {n: _sha(p) for n, p in paths.items()}, [timings]


def cmd_lipschitz(args, cfg: RunConfig):
    sc = cfg.scenario()
    lp = cfg.section("lipschitz", LIPSCHITZ_DEFAULTS)
    model = _load_model(args.model)
    if model.n != sc.n:
        raise ConfigError(f"model has n = {model.n}, scenario {sc.id!r} has n = {sc.n}")
    dataset = load_dataset(args.dataset) if args.dataset else None
    if model.supervised and dataset is None:
        raise ConfigError("a supervised model needs --dataset for pull-back sampling")
    cub = load_cubature(args.cubature) if args.cubature else None
    z = lipschitz_samples(model, dataset, int(lp["sample_count"]), cfg.seed)
    pot = sc.potential()
    orders = [int(o) for o in ([args.order] if args.order is not None else lp["orders"])]
    res = {f"order_{o}": estimate_lipschitz(model, pot, o, z=z, cubature=cub) for o in orders}
    res["assembly"] = "cubature" if cub is not None else "full"
    res["sample_count"] = int(lp["sample_count"])
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "lipschitz.json")
    _dump_json(path, res)
    print(json.dumps(res, sort_keys=True))
    return [path], {"model": _sha(args.model)}, []


def _load_states(path):
    if os.path.isdir(path):
        return load_dataset(path).snapshots
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line)["q"])
    return np.array(rows)


def cmd_project(args, cfg: RunConfig):
    sc = cfg.scenario()
    model = _load_model(args.model)
    states = _load_states(args.states)
    if states.shape[1] != model.n:
        raise ConfigError(f"states have n = {states.shape[1]}, model has n = {model.n}")
    states = states[:: max(1, args.every)]
    res = projection_error(model, states, sc.mass(), sc.mesh.dim)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "projection.json")
    _dump_json(path, dict(res.summary(), errors=[float(e) for e in res.errors],
                          flagged=[int(i) for i in np.flatnonzero(res.flagged)]))
    print(json.dumps(res.summary(), sort_keys=True))
    return [path], {"model": _sha(args.model), "states": _input_record(args.states)}, []


def cmd_pipeline(args, cfg: RunConfig):
    """gen-data, train and bench in one run directory."""
    outputs, untracked = [], []
    o, _, u = cmd_gen_data(args, cfg)
    outputs += o
    untracked += u
    args.dataset = os.path.join(args.out, "dataset")
    o, _, u = cmd_train(args, cfg)
    outputs += o
    untracked += u
    args.model, args.models_dir, args.cubature, args.lipschitz = None, args.out, None, True
    o, _, u = cmd_bench(args, cfg)
    outputs += o
    untracked += u
    return outputs, {}, untracked


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "cubature": cmd_cubature,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
    "lipschitz": cmd_lipschitz,
    "project": cmd_project,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run config JSON (or a bare scenario JSON)")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread cap")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lipsub", description="Neural-subspace deformable simulation toolkit.")
    p.add_argument("--version", action="version", version=f"lipsub {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sub.add_parser("gen-data", parents=[common], help="full-space episodes for supervised training")

    s = sub.add_parser("train", parents=[common], help="stage 1 plus ours/vanilla stage-2 continuations")
    s.add_argument("--dataset", help="dataset directory (default: OUT/dataset)")

    s = sub.add_parser("cubature", parents=[common], help="fit a cubature set for a model")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset")
    s.add_argument("--fraction", type=float, default=None)

    s = sub.add_parser("simulate", parents=[common], help="replay the scenario (full space without --model)")
    s.add_argument("--model")
    s.add_argument("--cubature", help="runtime cubature JSON")
    s.add_argument("--method", choices=["lbfgs", "projective_newton"], default=None)
    s.add_argument("--steps", type=int, default=None)

    s = sub.add_parser("bench", parents=[common], help="variant x method x epsilon replay tables")
    s.add_argument("--model", action="append", help="NAME=PATH, repeatable (default: ours and vanilla)")
    s.add_argument("--models-dir", help="directory holding ours.ckpt and vanilla.ckpt")
    s.add_argument("--cubature", help="runtime cubature JSON")
    s.add_argument("--dataset", help="dataset for Lipschitz pull-back samples")
    s.add_argument("--lipschitz", action="store_true", help="add order 0/1/2 Lipschitz estimates")

    s = sub.add_parser("lipschitz", parents=[common], help="order-statistics Lipschitz estimates")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset")
    s.add_argument("--cubature", help="estimate with this cubature instead of full assembly")
    s.add_argument("--order", type=int, choices=[0, 1, 2], default=None)

    s = sub.add_parser("project", parents=[common], help="projection error of states onto a model")
    s.add_argument("--model", required=True)
    s.add_argument("--states", required=True, help="dataset directory or trajectory JSONL")
    s.add_argument("--every", type=int, default=1, help="use every k-th state")

    sub.add_parser("pipeline", parents=[common], help="gen-data, train and bench in one run directory")
    return p


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.seed)
        os.makedirs(args.out, exist_ok=True)
        with _thread_limit(args.threads):
            outputs, inputs, untracked = COMMANDS[args.command](args, cfg)
        write_manifest(args.out, args.command, cfg, outputs, inputs, untracked, threads=args.threads)
    except ConfigError as exc:
        print(f"lipsub: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"lipsub: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"lipsub: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LipsubError as exc:
        print(f"lipsub: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return 0


if __name__ == "__main__":
    sys.exit(main())
