"""Minimum-energy (least-squares) moving horizon estimator, the baseline.

Over the window ``y_{t-M}..y_t`` (``M = min(t, N)``) it solves

    min  |chi - xbar|^2_{P^-1} + sum_k |w_k|^2_{Q^-1} + sum_k |y_k - C x_k|^2_{R^-1}
    s.t. x_0 = chi,  x_{k+1} = A x_k + w_k,  H x_k <= h  for every window state,

and returns the window-terminal state.  While ``t <= N`` the arrival
cost is the model prior.  Afterwards ``(xbar, P)`` is the predicted
belief at ``t-N`` of a Kalman filter run alongside on the unconstrained
model.  ``arrival_center="own"`` instead centres the arrival cost on the
one-step prediction of this estimator's own estimate at ``t-N-1``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .base import SequentialEstimatorMixin
from .estimators import EstimateRecord
from .exceptions import NotPD, SolverInfeasible
from .kalman import GaussianBelief, kf_predict, kf_update
from .model import DEFAULT_TOL, symmetrize, validate_model
from .qp import QpProblem, QpStatus, project_onto_polyhedron, solve_qp


@dataclass(frozen=True, eq=False)
class MemheState:
    horizon: int
    t: int
    window: tuple
    constraint: object = None
    # own estimates of the last N+1 steps, oldest first
    history: tuple = ()
    # predicted KF beliefs for the last N+1 times, oldest first
    kf_priors: tuple = ()
    kf_posterior: GaussianBelief | None = None


def initial_memhe_state(model, horizon, constraint=None, tol=DEFAULT_TOL):
    """Q must be PD here: the stage cost weights process noise by Q^{-1}."""
    model = validate_model(model, tol)
    if np.linalg.eigvalsh(model.Q).min() <= 0:
        raise NotPD("Q")
    return MemheState(horizon=horizon, t=0, window=(), constraint=constraint)


def _window_maps(A, M):
    """Phi[k] maps v = [chi, w_0..w_{M-1}] to x_k."""
    d = A.shape[0]
    Phi = np.zeros((M + 1, d, d * (M + 1)))
    Phi[0, :, :d] = np.eye(d)
    for k in range(1, M + 1):
        Phi[k] = A @ Phi[k - 1]
        Phi[k, :, d * k:d * (k + 1)] += np.eye(d)
    return Phi


def build_memhe_qp(model, window, xbar, P, constraint=None):
    Y = np.asarray(window, dtype=float).reshape(-1, model.q)
    M = Y.shape[0] - 1
    d = model.d
    Phi = _window_maps(model.A, M)
    Pi = np.linalg.inv(symmetrize(P))
    Qi = np.linalg.inv(model.Q)
    Ri = np.linalg.inv(model.R)
    n = d * (M + 1)
    H = np.zeros((n, n))
    c = np.zeros(n)
    H[:d, :d] += Pi
    c[:d] -= Pi @ xbar
    const = float(xbar @ Pi @ xbar)
    for k in range(M):
        sl = slice(d * (k + 1), d * (k + 2))
        H[sl, sl] += Qi
    for k in range(M + 1):
        CP = model.C @ Phi[k]
        H += CP.T @ Ri @ CP
        c -= CP.T @ Ri @ Y[k]
        const += float(Y[k] @ Ri @ Y[k])
    G = g = None
    if constraint is not None:
        G = np.vstack([constraint.H @ Phi[k] for k in range(M + 1)])
        g = np.tile(constraint.h, M + 1)
    return QpProblem.dense(2.0 * H, 2.0 * c, G, g, constant=const), Phi[M]


def memhe_step(state, y_t, model, tol=DEFAULT_TOL, on_infeasible="fallback",
               arrival_center="kalman"):
    """Process ``y_t``; returns ``(EstimateRecord, new_state)``."""
    y_t = np.asarray(y_t, dtype=float).reshape(-1)
    N, t = state.horizon, state.t

    if state.kf_posterior is None:
        predicted = GaussianBelief(model.prior_mean, model.prior_cov)
    else:
        predicted = kf_predict(state.kf_posterior, model)
    posterior = kf_update(predicted, y_t, model)
    kf_priors = (state.kf_priors + (predicted,))[-(N + 1):]

    window = (state.window + (y_t,))[-(N + 1):]
    if t <= N:
        xbar, P = model.prior_mean, model.prior_cov
    else:
        head = kf_priors[0]
        if arrival_center == "kalman":
            xbar = head.mean
        elif arrival_center == "own":
            xbar = model.A @ state.history[0]
        else:
            raise ValueError(f"unknown arrival_center {arrival_center!r}")
        P = head.cov

    problem, Phi_end = build_memhe_qp(model, np.vstack(window), xbar, P, state.constraint)
    sol = solve_qp(problem, tol)
    fallback = False
    if sol.status is QpStatus.INFEASIBLE:
        if on_infeasible == "raise":
            raise SolverInfeasible(f"MEMHE QP infeasible at t={t}")
        fallback = True
        relaxed = QpProblem.dense(problem.hessian(), problem.linear(), constant=problem.constant)
        v = solve_qp(relaxed, tol).u
        x_hat, _ = project_onto_polyhedron(Phi_end @ v, state.constraint, tol)
    else:
        x_hat = Phi_end @ sol.u

    post = posterior.cov
    record = EstimateRecord(t=t, x_hat=x_hat, Sigma=post, cost_trace=float(np.trace(post)),
                            solver_status=sol.status.value, active_rows=sol.active_rows,
                            fallback=fallback)
    history = (state.history + (x_hat,))[-(N + 1):]
    return record, replace(state, t=t + 1, window=window, history=history,
                           kf_priors=kf_priors, kf_posterior=posterior)


def batch_least_squares(model, measurements, prior_mean=None, prior_cov=None):
    """Unconstrained full-batch MAP estimate of ``x_T`` (dense normal equations).

    Kept deliberately separate from :func:`build_memhe_qp` for cross-checks.
    """
    Y = np.asarray(measurements, dtype=float).reshape(-1, model.q)
    T = Y.shape[0] - 1
    d = model.d
    xbar = model.prior_mean if prior_mean is None else prior_mean
    P = model.prior_cov if prior_cov is None else prior_cov
    # stacked residuals r = J v - b with v = [x_0, w_0..w_{T-1}]
    rows, rhs = [], []
    Lp = np.linalg.cholesky(np.linalg.inv(P))
    rows.append(np.hstack([Lp.T, np.zeros((d, d * T))]))
    rhs.append(Lp.T @ xbar)
    Lq = np.linalg.cholesky(np.linalg.inv(model.Q))
    for k in range(T):
        r = np.zeros((d, d * (T + 1)))
        r[:, d * (k + 1):d * (k + 2)] = Lq.T
        rows.append(r)
        rhs.append(np.zeros(d))
    Lr = np.linalg.cholesky(np.linalg.inv(model.R))
    state_map = np.hstack([np.eye(d), np.zeros((d, d * T))])
    for k in range(T + 1):
        rows.append(Lr.T @ model.C @ state_map)
        rhs.append(Lr.T @ Y[k])
        if k < T:
            nxt = model.A @ state_map
            nxt[:, d * (k + 1):d * (k + 2)] += np.eye(d)
            state_map = nxt
    v = scipy.linalg.lstsq(np.vstack(rows), np.concatenate(rhs))[0]
    return state_map @ v


class MinEnergyMHE(SequentialEstimatorMixin):
    """Least-squares MHE baseline with a fit/transform interface."""

    def __init__(self, model=None, horizon=4, constraint=None, arrival_center="kalman",
                 tol=DEFAULT_TOL):
        self.model = model
        self.horizon = horizon
        self.constraint = constraint
        self.arrival_center = arrival_center
        self.tol = tol

    def _prepare(self):
        self.model_ = validate_model(self.model, self.tol)

    def _start(self):
        return initial_memhe_state(self.model_, self.horizon, self.constraint, self.tol)

    def _advance(self, state, y):
        return memhe_step(state, y, self.model_, self.tol, arrival_center=self.arrival_center)
