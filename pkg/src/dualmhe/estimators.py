"""Full-information and moving-horizon minimum-variance estimators.

Four modes share one driver:

* ``FIE``  - unconstrained dual QP over all measurements,
* ``MHE``  - unconstrained dual QP over the last N+1 measurements with a
  propagated prior ``(A x_{t-N-1}, A S_{t-N-1} A' + Q)``,
* ``CFIE`` - FIE plus lagged-estimate polyhedral constraints,
* ``CMHE`` - MHE with the constraint on the current estimate and a prior
  propagated from its own constrained estimates.  For ``t <= N`` CMHE runs
  CFIE.

The driver is functional: :func:`step` returns a new
:class:`EstimatorState`.  :class:`DualMHE` wraps it in a fit/transform
estimator.
"""
from __future__ import annotations

import csv
import enum
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .base import SequentialEstimatorMixin
from .dual import assemble_estimate, dual_cost, dual_rollout
from .exceptions import DimensionMismatch, SolverInfeasible
from .kalman import kf_predict, kf_run, kf_update, prior_belief
from .model import DEFAULT_TOL, observability_index, polyhedron_contains, symmetrize, validate_model
from .qp import (QpProblem, QpStatus, build_dual_qp, fie_lags, project_onto_polyhedron,
                 solve_qp)


class Mode(str, enum.Enum):
    FIE = "FIE"
    MHE = "MHE"
    CFIE = "CFIE"
    CMHE = "CMHE"

    @property
    def constrained(self):
        return self in (Mode.CFIE, Mode.CMHE)

    @property
    def moving(self):
        return self in (Mode.MHE, Mode.CMHE)


@dataclass(frozen=True, eq=False)
class EstimateRecord:
    t: int
    x_hat: np.ndarray
    Sigma: np.ndarray
    cost_trace: float
    solver_status: str
    active_rows: tuple = ()
    wall_time: float = 0.0
    alphas: np.ndarray | None = field(default=None, repr=False)
    fallback: bool = False


@dataclass(frozen=True, eq=False)
class EstimatorState:
    mode: Mode
    horizon: int | None
    t: int
    window: tuple
    n: int
    constraint: object = None
    # posteriors (x_hat, Sigma) of the last N+1 steps, oldest first
    history: tuple = ()
    warm_rows: tuple = ()

    def __post_init__(self):
        if self.mode.constrained and self.constraint is None:
            raise ValueError(f"{self.mode.value} requires a constraint set")
        if not self.mode.constrained and self.constraint is not None:
            raise ValueError(f"{self.mode.value} does not take a constraint set")
        if self.mode.moving and (self.horizon is None or self.horizon < 0):
            raise ValueError("moving-horizon modes need a horizon N >= 0")


def initial_state(model, mode, horizon=None, constraint=None, tol=DEFAULT_TOL):
    mode = Mode(mode)
    model = validate_model(model, tol)
    n = observability_index(model.A, model.C, tol)
    return EstimatorState(mode=mode, horizon=horizon if mode.moving else None, t=0,
                          window=(), n=n, constraint=constraint)


def propagate_prior(Sigma_prev, xhat_prev, model):
    """One-step prior ``(A S A' + Q, A x)``; used for both MHE and CMHE."""
    A = model.A
    return symmetrize(A @ Sigma_prev @ A.T + model.Q), A @ np.asarray(xhat_prev, dtype=float)


def step(state, y_t, model, tol=DEFAULT_TOL, on_infeasible="fallback"):
    """Process measurement ``y_t``; returns ``(EstimateRecord, new_state)``.

    When a constrained QP is infeasible the default is to fall back to the
    unconstrained solution of the same problem, project its estimate onto
    the constraint set and flag the record; ``on_infeasible="raise"``
    raises :class:`SolverInfeasible` instead.
    """
    y_t = np.asarray(y_t, dtype=float).reshape(-1)
    if y_t.size != model.q:
        raise DimensionMismatch(f"measurement has length {y_t.size}, expected {model.q}")
    started = time.perf_counter()
    t = state.t
    window = state.window + (y_t,)
    N = state.horizon
    truncated = state.mode.moving and t > N
    if truncated:
        window = window[-(N + 1):]
        x_prev, S_prev = state.history[0]
        prior_cov, prior_mean = propagate_prior(S_prev, x_prev, model)
        lags = [0]
    else:
        prior_mean, prior_cov = model.prior_mean, model.prior_cov
        lags = fie_lags(t, state.n)
    Y = np.vstack(window)

    constraint = state.constraint
    problem = build_dual_qp(model, prior_cov, prior_mean, Y, constraint, lags)
    warm = state.warm_rows if truncated else None
    sol = solve_qp(problem, tol, warm_start=warm)

    fallback = False
    if sol.status is QpStatus.INFEASIBLE:
        if on_infeasible == "raise":
            raise SolverInfeasible(f"{state.mode.value} QP infeasible at t={t}")
        fallback = True
        relaxed = QpProblem(problem.hessian_blocks, problem.linear_terms,
                            np.zeros((0, problem.n_vars)), np.zeros(0),
                            problem.constant, problem.metadata)
        sol_u = solve_qp(relaxed, tol)
        controls = sol_u.alphas
    else:
        controls = sol.alphas
    traj = dual_rollout(model, controls)
    x_hat = assemble_estimate(traj, controls, prior_mean, Y)
    if fallback:
        x_hat, _ = project_onto_polyhedron(x_hat, constraint, tol)
    cost = dual_cost(model, prior_cov, controls, traj)

    record = EstimateRecord(
        t=t, x_hat=x_hat, Sigma=cost.Sigma, cost_trace=cost.trace_value,
        solver_status=sol.status.value, active_rows=sol.active_rows,
        wall_time=time.perf_counter() - started, alphas=controls.alphas, fallback=fallback,
    )
    if state.mode.moving:
        history = (state.history + ((x_hat, cost.Sigma),))[-(N + 1):]
        kept = window[-(N + 1):]
    else:
        history = ()
        kept = window
    new_state = replace(state, t=t + 1, window=tuple(kept), history=history,
                        warm_rows=sol.active_rows if sol.optimal else ())
    return record, new_state


def run(model, measurements, mode, horizon=None, constraint=None, tol=DEFAULT_TOL):
    """Run an estimator over ``y_0..y_T``; returns the list of records."""
    model = validate_model(model, tol)
    state = initial_state(model, mode, horizon, constraint, tol)
    Y = np.asarray(measurements, dtype=float).reshape(-1, model.q)
    records = []
    for y in Y:
        rec, state = step(state, y, model, tol)
        records.append(rec)
    return records


def fie_fast_path(model, measurements, tol=DEFAULT_TOL):
    """Unconstrained FIE through the equivalent Kalman recursion."""
    model = validate_model(model, tol)
    out = []
    for t, belief in enumerate(kf_run(model, measurements)):
        out.append(EstimateRecord(t=t, x_hat=belief.mean, Sigma=belief.cov,
                                  cost_trace=float(np.trace(belief.cov)),
                                  solver_status=QpStatus.OPTIMAL.value))
    return out


def records_to_csv(records, path_or_file):
    """Write records as CSV: t, x_hat_0..x_hat_{d-1}, cost_trace, status, active_row_count."""
    d = records[0].x_hat.size if records else 0
    header = ["t"] + [f"x_hat_{i}" for i in range(d)] + ["cost_trace", "status", "active_row_count"]

    def _write(fh):
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in records:
            w.writerow([r.t, *(repr(float(v)) for v in r.x_hat), repr(r.cost_trace),
                        r.solver_status, len(r.active_rows)])

    if hasattr(path_or_file, "write"):
        _write(path_or_file)
    else:
        with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
            _write(fh)


def constraint_satisfied(record, constraint, tol=DEFAULT_TOL):
    return polyhedron_contains(constraint, record.x_hat, tol)


class DualMHE(SequentialEstimatorMixin):
    """Minimum-variance (dual) estimator with a fit/transform interface.

    Parameters
    ----------
    model : SystemModel
    mode : {"FIE", "MHE", "CFIE", "CMHE"}
    horizon : int, optional
        Window length minus one; required for the moving-horizon modes.
    constraint : PolyhedralSet, optional
        Required for the constrained modes, forbidden otherwise.
    tol : ToleranceConfig

    Attributes
    ----------
    records_ : list of EstimateRecord
    estimates_ : ndarray of shape (T, d)
    cost_traces_ : ndarray of shape (T,)
    n_ : int
        Observability index of (A, C).
    """

    def __init__(self, model=None, mode="CMHE", horizon=None, constraint=None, tol=DEFAULT_TOL):
        self.model = model
        self.mode = mode
        self.horizon = horizon
        self.constraint = constraint
        self.tol = tol

    def _prepare(self):
        if self.model is None:
            raise ValueError("DualMHE needs a model")
        self.model_ = validate_model(self.model, self.tol)
        self.n_ = observability_index(self.model_.A, self.model_.C, self.tol)

    def _start(self):
        return initial_state(self.model_, self.mode, self.horizon, self.constraint, self.tol)

    def _advance(self, state, y):
        return step(state, y, self.model_, self.tol)

    @property
    def cost_traces_(self):
        return np.array([r.cost_trace for r in self.records_])

    @property
    def covariances_(self):
        return np.array([r.Sigma for r in self.records_])


class KalmanFilterEstimator(SequentialEstimatorMixin):
    """Update-first Kalman filter with the same interface as :class:`DualMHE`."""

    def __init__(self, model=None, tol=DEFAULT_TOL):
        self.model = model
        self.tol = tol

    def _prepare(self):
        self.model_ = validate_model(self.model, self.tol)

    def _start(self):
        return 0, None

    def _advance(self, state, y):
        t, belief = state
        belief = prior_belief(self.model_) if belief is None else kf_predict(belief, self.model_)
        belief = kf_update(belief, y, self.model_)
        record = EstimateRecord(t=t, x_hat=belief.mean, Sigma=belief.cov,
                                cost_trace=float(np.trace(belief.cov)),
                                solver_status=QpStatus.OPTIMAL.value)
        return record, (t + 1, belief)
