"""Construction losses, the Lipschitz loss and the two-stage training loop.

All losses are written generically so that the same function gives a plain
value (logging, oracles) or a tape recording (parameter gradients) depending
on whether the model is bound to tape variables.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import jet as jt
from . import tape as T
from .cubature import CubatureSet, fit_cubature
from .energy import Potential
from .errors import ConfigError, ModeError, NumericError, TrainingDiverged
from .full_solver import Dataset
from .mesh import MassMatrix
from .network import SubspaceModel, checkpoint_bytes, decode_generic, encode, encode_generic, save_checkpoint
from .reduced import ReducedPotential, derivative_slot

SUPERVISED, UNSUPERVISED = "supervised", "unsupervised"


@dataclass
class TrainConfig:
    mode: str = SUPERVISED
    lambda_ls: float = 0.0
    order: int = 2
    lambda_rep: float = 1.0
    sigma: float = 1.0
    batch_size: int = 32
    lipschitz_pairs: int = 8
    learning_rate: float = 1e-4
    learning_rate_stage2: Optional[float] = None
    stage1_steps: int = 1000
    stage2_steps: int = 0
    seed: int = 0
    r: int = 4
    hidden: Optional[list] = None
    cubature_fraction: float = 0.15
    cubature_samples_per_element: int = 10
    log_every: int = 10
    lipschitz_enabled: bool = True

    def __post_init__(self):
        if self.mode not in (SUPERVISED, UNSUPERVISED):
            raise ConfigError(f"mode must be '{SUPERVISED}' or '{UNSUPERVISED}'")
        if self.lambda_ls < 0:
            raise ConfigError("lambda_ls must be >= 0")
        if self.order not in (0, 1, 2):
            raise ConfigError("order must be 0, 1 or 2")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 2")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.lipschitz_pairs < 1:
            raise ConfigError("lipschitz_pairs must be >= 1")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("step counts must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training options: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses


def reconstruction_loss(model: SubspaceModel, batch, mass: MassMatrix):
    """Mean mass-weighted squared reconstruction error of the autoencoder."""
    if model.encoder is None:
        raise ModeError("reconstruction loss needs an encoder")
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    rec = decode_generic(model, encode_generic(model, batch))
    diff = rec - batch
    return T.sum_(diff * diff * mass.diag) * (1.0 / batch.shape[0])


def _full_rows(potential: Potential, x, layout):
    rows = layout.rows
    if rows.size == x.shape[-1] and np.array_equal(rows, np.arange(rows.size)):
        return x
    return jt.take(x, rows, axis=-1)


def potential_of_decoded(model: SubspaceModel, z, potential: Potential, layout=None):
    """``P(f(z))`` for a batch, over every term."""
    layout = layout or potential.layout(None)
    x = decode_generic(model, z)
    return potential.energy_generic(_full_rows(potential, x, layout), layout)


def unsupervised_loss(model: SubspaceModel, z, potential: Potential, mass: MassMatrix, lambda_rep: float,
                      sigma: float, layout=None):
    """Mean potential plus the log-ratio repulsion over consecutive pairs."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[0] % 2:
        raise ValueError("batch size must be even")
    layout = layout or potential.layout(None)
    x = decode_generic(model, z)
    energy = potential.energy_generic(_full_rows(potential, x, layout), layout)
    pot_term = T.sum_(energy) * (1.0 / z.shape[0])
    d = x[0::2] - x[1::2]
    dist = T.sqrt(T.sum_(d * d * mass.diag, axis=-1))
    dz = np.linalg.norm(z[0::2] - z[1::2], axis=-1)
    if np.any(dz == 0):
        raise ValueError("coincident latent pair in repulsion term")
    lr = T.log(dist * (1.0 / (sigma * dz)))
    rep = T.sum_(lr * lr) * (1.0 / dz.size)
    return pot_term + lambda_rep * rep


def lipschitz_loss(model: SubspaceModel, z1, z2, order: int, reduced: ReducedPotential):
    """Mean over pairs of ``|D^o P~(z1) - D^o P~(z2)|_F^2 / |z1 - z2|^2``."""
    z1 = np.atleast_2d(np.asarray(z1, dtype=float))
    z2 = np.atleast_2d(np.asarray(z2, dtype=float))
    npair = z1.shape[0]
    dz2 = np.sum((z1 - z2) ** 2, axis=1)
    if np.any(dz2 == 0):
        raise ValueError("coincident latent pair in Lipschitz loss")
    out = reduced.generic(model, np.vstack([z1, z2]), order)
    tens, w = derivative_slot(out, order)
    a, b = tens[..., :npair], tens[..., npair:]
    diff = a - b
    sq = diff * diff
    if order == 2:
        sq = sq * w[:, None]
    if order > 0:
        sq = T.sum_(sq, axis=0)
    vals = T.value(sq)
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise NumericError(f"non-finite order-{order} derivative difference for pair {bad}")
    return T.sum_(sq * (1.0 / dz2)) * (1.0 / npair)


# ---------------------------------------------------------------------------
# sampling


def sample_pullback(model: SubspaceModel, mode: str, dataset: Optional[Dataset], rng, count: int) -> np.ndarray:
    """Latent samples: encoded snapshots (supervised) or standard normal draws."""
    if mode == SUPERVISED:
        if dataset is None or len(dataset) == 0:
            raise ValueError("supervised pull-back sampling needs a nonempty dataset")
        idx = rng.integers(len(dataset), size=count)
        return encode(model, dataset.snapshots[idx])
    return rng.standard_normal((count, model.r))


def sample_pairs(model, mode, dataset, rng, n_pairs: int, max_tries: int = 100):
    """Shuffle ``2 n_pairs`` pull-back samples and pair them consecutively.

    Coincident pairs get their second member redrawn. Encoding the same
    snapshot in different batch shapes can differ in the last bits, so the
    test uses a relative tolerance rather than exact equality.
    """
    z = sample_pullback(model, mode, dataset, rng, 2 * n_pairs)
    z = z[rng.permutation(z.shape[0])]
    z1, z2 = z[0::2].copy(), z[1::2].copy()

    def coincident(a, b):
        return np.linalg.norm(a - b) <= 1e-9 * max(1.0, np.linalg.norm(a))

    for i in range(n_pairs):
        tries = 0
        while coincident(z1[i], z2[i]):
            if tries >= max_tries:
                raise ValueError("could not draw a non-coincident latent pair")
            z2[i] = sample_pullback(model, mode, dataset, rng, 1)[0]
            tries += 1
    return z1, z2


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            out.append(p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


@dataclass
class TrainResult:
    model: SubspaceModel
    stage1: SubspaceModel
    cubature: Optional[CubatureSet]
    history: list = field(default_factory=list)


class _Metrics:
    def __init__(self, path=None):
        self.fh = open(path, "a") if path else None
        self.rows = []
        self.t0 = time.perf_counter()

    def write(self, row):
        self.rows.append(row)
        if self.fh:
            self.fh.write(json.dumps(dict(row, wall_time=round(time.perf_counter() - self.t0, 6)),
                                     sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def normalization_from_dataset(dataset: Dataset, rest_q=None, mode=SUPERVISED):
    """Per-DOF mean shift and global standard deviation scale."""
    if mode == UNSUPERVISED or dataset is None or len(dataset) == 0:
        n = rest_q.size
        return np.array(rest_q, dtype=float), np.ones(n)
    Q = dataset.snapshots
    shift = Q.mean(axis=0)
    std = float(np.std(Q - shift))
    return shift, np.full(Q.shape[1], std if std > 0 else 1.0)


class Trainer:
    """Runs training stages for one mesh/material/mass triple."""

    def __init__(self, cfg: TrainConfig, potential: Potential, mass: MassMatrix, dataset: Optional[Dataset] = None,
                 metrics_path=None, checkpoint_dir=None):
        if cfg.mode == SUPERVISED and (dataset is None or len(dataset) == 0):
            raise ConfigError("supervised training needs a nonempty dataset")
        self.cfg = cfg
        self.potential = potential
        self.mass = mass
        self.dataset = dataset
        self.layout = potential.layout(None)
        self.metrics = _Metrics(metrics_path)
        self.checkpoint_dir = checkpoint_dir
        ss = np.random.SeedSequence(cfg.seed)
        s1, s2, ls1, ls2, cub = ss.spawn(5)
        self._streams = {"batch1": s1, "batch2": s2, "ls1": ls1, "ls2": ls2, "cubature": cub}

    def rng(self, name):
        return np.random.default_rng(self._streams[name])

    # -- objective ----------------------------------------------------------

    def construction_loss(self, model, batch):
        cfg = self.cfg
        if cfg.mode == SUPERVISED:
            return reconstruction_loss(model, batch, self.mass)
        return unsupervised_loss(model, batch, self.potential, self.mass, cfg.lambda_rep, cfg.sigma, self.layout)

    def draw_batch(self, rng, model):
        cfg = self.cfg
        if cfg.mode == SUPERVISED:
            idx = rng.integers(len(self.dataset), size=cfg.batch_size)
            return self.dataset.snapshots[idx]
        z = rng.standard_normal((cfg.batch_size, model.r))
        return z[rng.permutation(cfg.batch_size)]

    # -- stages -------------------------------------------------------------

    def run_stage(self, model: SubspaceModel, stage: int, steps: int, lambda_ls: float,
                  reduced: Optional[ReducedPotential], lr: float) -> SubspaceModel:
        cfg = self.cfg
        rng_b = self.rng(f"batch{stage}")
        rng_ls = self.rng(f"ls{stage}")
        params = [np.array(T.value(p), dtype=float) for p in model.params()]
        opt = Adam(params, lr)
        use_ls = lambda_ls > 0 and reduced is not None
        log_ls = cfg.lipschitz_enabled and reduced is not None
        for k in range(steps):
            cur = model.bind(params)
            batch = self.draw_batch(rng_b, cur)
            pairs = sample_pairs(cur, cfg.mode, self.dataset, rng_ls, cfg.lipschitz_pairs) if use_ls else None
            parts = {}

            def objective(p):
                m = model.bind(p)
                lc = self.construction_loss(m, batch)
                parts["c"] = float(T.value(lc))
                if use_ls:
                    ll = lipschitz_loss(m, pairs[0], pairs[1], cfg.order, reduced)
                    parts["ls"] = float(T.value(ll))
                    return lc + lambda_ls * ll
                return lc

            try:
                tape = T.LossTape(objective, params)
                grads = tape.gradient()
            except NumericError as exc:
                raise self._diverged(model.bind(params), stage, k, exc) from None
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise self._diverged(model.bind(params), stage, k, NumericError("non-finite gradient"))
            row = {"stage": stage, "step": k, "loss_c": parts["c"], "total": tape.value,
                   "lr": cosine_lr(lr, k, steps)}
            if use_ls:
                row["loss_ls"] = parts["ls"]
            elif log_ls and (k % cfg.log_every == 0 or k == steps - 1):
                # logged only; never enters the update
                z1, z2 = sample_pairs(cur, cfg.mode, self.dataset, rng_ls, cfg.lipschitz_pairs)
                row["loss_ls"] = float(T.value(lipschitz_loss(cur, z1, z2, cfg.order, reduced)))
            self.metrics.write(row)
            params = opt.step(params, grads, row["lr"])
        return model.bind(params).copy()

    def _diverged(self, model, stage, step, exc):
        path = None
        if self.checkpoint_dir:
            path = os.path.join(self.checkpoint_dir, "last_good.ckpt")
            save_checkpoint(model, path)
        return TrainingDiverged(f"training diverged at stage {stage} step {step}: {exc}", checkpoint=path, step=step)

    def stage1(self, model: SubspaceModel) -> SubspaceModel:
        return self.run_stage(model, 1, self.cfg.stage1_steps, 0.0, None, self.cfg.learning_rate)

    def fit_cubature(self, model: SubspaceModel) -> CubatureSet:
        cfg = self.cfg
        target = max(1, int(round(cfg.cubature_fraction * self.potential.n_terms)))
        rng = self.rng("cubature")
        zs = sample_pullback(model, cfg.mode, self.dataset, rng, cfg.cubature_samples_per_element * target)
        sha = hashlib.sha256(checkpoint_bytes(model)).hexdigest()
        return fit_cubature(model, self.potential, zs, target, sha)

    def stage2(self, stage1_model: SubspaceModel, cubature: Optional[CubatureSet], lambda_ls=None):
        cfg = self.cfg
        lam = cfg.lambda_ls if lambda_ls is None else lambda_ls
        reduced = None
        if cfg.lipschitz_enabled or lam > 0:
            reduced = ReducedPotential(self.potential, cubature if cfg.order == 2 else None)
        lr = cfg.learning_rate_stage2 if cfg.learning_rate_stage2 is not None else cfg.learning_rate
        return self.run_stage(stage1_model, 2, cfg.stage2_steps, lam, reduced, lr)

    def close(self):
        self.metrics.close()


def train(model: SubspaceModel, cfg: TrainConfig, dataset: Optional[Dataset], potential: Potential,
          mass: MassMatrix, cubature: Optional[CubatureSet] = None, metrics_path=None,
          checkpoint_dir=None) -> TrainResult:
    """Stage 1 (construction loss), cubature fit, stage 2 (plus Lipschitz loss)."""
    tr = Trainer(cfg, potential, mass, dataset, metrics_path, checkpoint_dir)
    try:
        s1 = tr.stage1(model)
        if checkpoint_dir:
            save_checkpoint(s1, os.path.join(checkpoint_dir, "stage1.ckpt"))
        cub = cubature
        if cub is None and cfg.order == 2 and cfg.stage2_steps > 0 and (cfg.lambda_ls > 0 or cfg.lipschitz_enabled):
            cub = tr.fit_cubature(s1)
        s2 = tr.stage2(s1, cub) if cfg.stage2_steps > 0 else s1.copy()
        if checkpoint_dir:
            save_checkpoint(s2, os.path.join(checkpoint_dir, "stage2.ckpt"))
        return TrainResult(s2, s1, cub, tr.metrics.rows)
    finally:
        tr.close()


@dataclass
class VariantResult:
    stage1: SubspaceModel
    ours: SubspaceModel
    vanilla: SubspaceModel
    cubature: Optional[CubatureSet]
    history: list = field(default_factory=list)


def train_variants(model: SubspaceModel, cfg: TrainConfig, dataset: Optional[Dataset], potential: Potential,
                   mass: MassMatrix, metrics_path=None, checkpoint_dir=None) -> VariantResult:
    """One stage-1 model continued twice: with ``cfg.lambda_ls`` (ours) and with 0 (vanilla).

    Both continuations draw from the same stage-2 streams, so the Lipschitz
    term is the only difference between them.
    """
    tr = Trainer(cfg, potential, mass, dataset, metrics_path, checkpoint_dir)
    try:
        s1 = tr.stage1(model)
        cub = tr.fit_cubature(s1) if cfg.order == 2 else None
        ours = tr.stage2(s1, cub, cfg.lambda_ls)
        vanilla = tr.stage2(s1, cub, 0.0)
        if checkpoint_dir:
            for name, m in (("stage1", s1), ("ours", ours), ("vanilla", vanilla)):
                save_checkpoint(m, os.path.join(checkpoint_dir, f"{name}.ckpt"))
        return VariantResult(s1, ours, vanilla, cub, tr.metrics.rows)
    finally:
        tr.close()
