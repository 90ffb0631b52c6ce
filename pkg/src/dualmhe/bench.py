"""Seeded Monte-Carlo benchmark of the estimators on a linear plant.

Every path draws its randomness from its own ``SeedSequence`` child
(master seed, path index), so results do not depend on execution order
or on ``BENCH_THREADS``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .estimators import initial_state, step
from .exceptions import ConfigError, UnknownEstimator
from .kalman import kf_predict, kf_update, prior_belief
from .memhe import initial_memhe_state, memhe_step
from .model import (DEFAULT_TOL, PolyhedralSet, batch_reactor, model_from_dict,
                    polyhedron_contains, validate_model)

logger = logging.getLogger(__name__)

METHODS = ("kf", "fie", "mhe", "cfie", "cmhe", "memhe")
CONSTRAINED = ("cfie", "cmhe", "memhe")


@dataclass
class ScenarioConfig:
    model: object = "batch_reactor"
    constraint: object = "model"
    init: dict = field(default_factory=lambda: {"type": "gaussian"})
    # simulation noise covariances; default to the model's Q and R
    noise: dict = field(default_factory=dict)
    horizon: int = 4
    steps: int = 30
    paths: int = 200
    methods: list = field(default_factory=lambda: ["cmhe", "memhe"])
    seed: int = 0
    out: str = "bench_out"
    dump_trajectories: bool = False
    base_dir: str = "."

    @classmethod
    def from_dict(cls, doc, base_dir="."):
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc, base_dir=str(base_dir))
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "base_dir"}

    def check(self):
        if self.paths < 1:
            raise ConfigError("paths must be >= 1")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.horizon < 0:
            raise ConfigError("horizon must be >= 0")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if self.init.get("type") not in ("gaussian", "uniform"):
            raise ConfigError("init.type must be 'gaussian' or 'uniform'")
        if set(self.noise) - {"Q", "R"}:
            raise ConfigError("noise accepts only 'Q' and 'R'")

    def resolve(self):
        """Return ``(validated model, constraint or None)``."""
        if self.model == "batch_reactor":
            model, constraint = batch_reactor()
        elif isinstance(self.model, dict):
            model, constraint = model_from_dict(self.model)
        else:
            path = Path(self.base_dir) / self.model
            try:
                model, constraint = model_from_dict(json.loads(path.read_text(encoding="utf-8")))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read model file {path}: {exc}") from exc
        if self.constraint is None:
            constraint = None
        elif self.constraint == "nonnegative":
            constraint = PolyhedralSet.nonnegative_orthant(model.d)
        elif isinstance(self.constraint, dict):
            constraint = PolyhedralSet(self.constraint["H"], self.constraint["h"])
        elif self.constraint != "model":
            raise ConfigError(f"bad constraint spec {self.constraint!r}")
        model = validate_model(model)
        if constraint is None and any(m in CONSTRAINED for m in self.methods):
            raise ConfigError("constrained methods need a constraint set")
        if constraint is not None and constraint.dim != model.d:
            raise ConfigError("constraint dimension does not match the model")
        self._check_dims(model)
        return model, constraint

    def _check_dims(self, model):
        d, q = model.d, model.q
        for key in ("mean", "lower", "upper"):
            if key in self.init and np.shape(self.init[key]) != (d,):
                raise ConfigError(f"init.{key} must have length {d}")
        if "cov" in self.init and np.shape(self.init["cov"]) != (d, d):
            raise ConfigError(f"init.cov must be {d}x{d}")
        for key, k in (("Q", d), ("R", q)):
            if key in self.noise:
                M = np.asarray(self.noise[key], dtype=float)
                if M.shape != (k, k) or np.linalg.eigvalsh((M + M.T) / 2).min() < -1e-12:
                    raise ConfigError(f"noise.{key} must be a {k}x{k} PSD matrix")

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class BenchmarkDataset:
    truth: np.ndarray                   # (paths, T+1, d)
    estimates: dict                     # method -> (paths, T+1, d)
    costs: dict                         # method -> (paths, T+1)
    statuses: dict                      # method -> (paths, T+1) str
    fallbacks: dict                     # method -> (paths, T+1) bool
    metadata: dict

    @property
    def methods(self):
        return list(self.estimates)

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.truth).tobytes())
        for m in sorted(self.estimates):
            h.update(m.encode())
            h.update(np.ascontiguousarray(self.estimates[m]).tobytes())
            h.update(np.ascontiguousarray(self.costs[m]).tobytes())
            h.update("|".join(self.statuses[m].ravel()).encode())
        return h.hexdigest()


def _sqrt_cov(M):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(M)
        return V * np.sqrt(np.clip(w, 0.0, None))


def _path_rng(seed, i):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))


def sample_path(model, init, T, rng, noise=None):
    """Draw x_0 and iterate the plant; returns ``(x, y)`` of shapes (T+1, d), (T+1, q)."""
    noise = noise or {}
    d = model.d
    if init["type"] == "gaussian":
        mean = np.asarray(init.get("mean", model.prior_mean), dtype=float)
        cov = np.asarray(init.get("cov", model.prior_cov), dtype=float)
        x = mean + _sqrt_cov(cov) @ rng.standard_normal(d)
    else:
        lower = np.asarray(init.get("lower", np.zeros(d)), dtype=float)
        upper = np.asarray(init.get("upper", 2.0 * model.prior_mean), dtype=float)
        x = rng.uniform(lower, upper)
    Lq = _sqrt_cov(np.asarray(noise.get("Q", model.Q), dtype=float))
    Lr = _sqrt_cov(np.asarray(noise.get("R", model.R), dtype=float))
    xs, ys = np.empty((T + 1, d)), np.empty((T + 1, model.q))
    for t in range(T + 1):
        xs[t] = x
        ys[t] = model.C @ x + Lr @ rng.standard_normal(model.q)
        x = model.A @ x + Lq @ rng.standard_normal(d)
    return xs, ys


def _run_method(method, model, constraint, N, Y, tol):
    T1, d = Y.shape[0], model.d
    est = np.full((T1, d), np.nan)
    cost = np.full(T1, np.nan)
    status = np.full(T1, "Error", dtype=object)
    fb = np.zeros(T1, dtype=bool)
    try:
        if method == "kf":
            belief = None
            for t, y in enumerate(Y):
                belief = prior_belief(model) if belief is None else kf_predict(belief, model)
                belief = kf_update(belief, y, model)
                est[t], cost[t], status[t] = belief.mean, np.trace(belief.cov), "Optimal"
        elif method == "memhe":
            state = initial_memhe_state(model, N, constraint, tol)
            for t, y in enumerate(Y):
                rec, state = memhe_step(state, y, model, tol)
                est[t], cost[t], status[t], fb[t] = rec.x_hat, rec.cost_trace, rec.solver_status, rec.fallback
        else:
            mode = method.upper()
            cons = constraint if method in ("cfie", "cmhe") else None
            state = initial_state(model, mode, N, cons, tol)
            for t, y in enumerate(Y):
                rec, state = step(state, y, model, tol)
                est[t], cost[t], status[t], fb[t] = rec.x_hat, rec.cost_trace, rec.solver_status, rec.fallback
    except Exception:  # recorded per path, never aborts the run
        logger.exception("estimator %s failed", method)
    return est, cost, status, fb


def simulate_paths(config, tol=DEFAULT_TOL):
    config.check()
    model, constraint = config.resolve()
    T, Ns = config.steps, config.paths

    def one(i):
        xs, ys = sample_path(model, config.init, T, _path_rng(config.seed, i), config.noise)
        return xs, {m: _run_method(m, model, constraint, config.horizon, ys, tol) for m in config.methods}

    threads = int(os.environ.get("BENCH_THREADS", "1") or 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(Ns)))
    else:
        results = [one(i) for i in range(Ns)]

    truth = np.stack([r[0] for r in results])
    out = {k: {} for k in ("est", "cost", "status", "fb")}
    for m in config.methods:
        for j, k in enumerate(("est", "cost", "status", "fb")):
            out[k][m] = np.stack([r[1][m][j] for r in results])
    meta = {"config_hash": config.digest(), "seed": config.seed, "version": __version__,
            "numpy": np.__version__, "paths": Ns, "steps": T,
            "prior_mismatch": config.init.get("type") == "uniform",
            "constraint": None if constraint is None else constraint.to_dict()}
    return BenchmarkDataset(truth, out["est"], out["cost"], out["status"], out["fb"], meta)


def empirical_mse(dataset, estimator):
    """Mean over paths of the squared estimation error at each t."""
    if estimator not in dataset.estimates:
        raise UnknownEstimator(estimator)
    err = np.sum((dataset.truth - dataset.estimates[estimator]) ** 2, axis=2)
    return err.mean(axis=0)


def constraint_violations(dataset, constraint, tol=DEFAULT_TOL):
    """Per method: number of Optimal estimates outside the constraint set."""
    counts = {}
    for m in dataset.methods:
        if m not in CONSTRAINED:
            continue
        est, st = dataset.estimates[m], dataset.statuses[m]
        bad = 0
        for i, t in zip(*np.nonzero(st == "Optimal")):
            bad += not polyhedron_contains(constraint, est[i, t], tol)
        counts[m] = int(bad)
    return counts


def _summary(config, dataset, constraint):
    T1 = config.steps + 1
    stats = {}
    for m in dataset.methods:
        e = empirical_mse(dataset, m)
        st = dataset.statuses[m]
        stats[m] = {
            "mse_mean": float(np.mean(e)),
            "mse_mean_t2_on": float(np.mean(e[2:])) if T1 > 2 else None,
            "mse_final": float(e[-1]),
            "cost_trace_mean": float(np.mean(dataset.costs[m])),
            "optimal_steps": int(np.sum(st == "Optimal")),
            "fallback_steps": int(np.sum(dataset.fallbacks[m])),
            "error_steps": int(np.sum(st == "Error")),
        }
    doc = {"config": config.to_dict(), "seed": config.seed, "digest": dataset.digest(),
           "metadata": dataset.metadata, "methods": stats,
           "prior_mismatch": dataset.metadata["prior_mismatch"]}
    if constraint is not None:
        doc["constraint_violations"] = constraint_violations(dataset, constraint)
    if "cfie" in dataset.estimates and "cmhe" in dataset.estimates:
        ncf = np.linalg.norm(dataset.estimates["cfie"], axis=2)
        ncm = np.linalg.norm(dataset.estimates["cmhe"], axis=2)
        ccf, ccm = dataset.costs["cfie"], dataset.costs["cmhe"]
        doc["cfie_vs_cmhe"] = {
            "max_abs_norm_diff": float(np.max(np.abs(ncm - ncf))),
            "max_norm_cfie": float(np.max(ncf)),
            "max_abs_cost_diff": float(np.max(np.abs(ccm - ccf))),
            "max_cost_cfie": float(np.max(ccf)),
        }
    return doc


def write_outputs(config, dataset, constraint, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = dataset.methods
    T1 = config.steps + 1
    mse = {m: empirical_mse(dataset, m) for m in methods}
    with open(out / "mse.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"e_{m}" for m in methods])
        for t in range(T1):
            w.writerow([t] + [repr(float(mse[m][t])) for m in methods])
    with open(out / "costs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"cost_{m}" for m in methods])
        for t in range(T1):
            w.writerow([t] + [repr(float(np.mean(dataset.costs[m][:, t]))) for m in methods])
    if config.dump_trajectories:
        d = dataset.truth.shape[2]
        with open(out / "trajectories.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "t", "method"] + [f"x_{k}" for k in range(d)]
                       + [f"x_hat_{k}" for k in range(d)] + ["cost_trace", "status"])
            for i in range(dataset.truth.shape[0]):
                for m in methods:
                    for t in range(T1):
                        w.writerow([i, t, m, *map(repr, dataset.truth[i, t].tolist()),
                                    *map(repr, dataset.estimates[m][i, t].tolist()),
                                    repr(float(dataset.costs[m][i, t])), dataset.statuses[m][i, t]])
    summary = _summary(config, dataset, constraint)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return summary


def run_benchmark(config, out_dir=None):
    """Simulate, then write mse.csv, costs.csv, summary.json (+ trajectories.csv)."""
    if not isinstance(config, ScenarioConfig):
        config = ScenarioConfig.load(config)
    _, constraint = config.resolve()
    dataset = simulate_paths(config)
    summary = write_outputs(config, dataset, constraint, out_dir or config.out)
    return dataset, summary
