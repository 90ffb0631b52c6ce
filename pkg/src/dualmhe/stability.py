"""Observer-stability tooling for the constrained estimators.

Covers the two cost-monotonicity conditions, the deadbeat dual policy
that bounds the constrained cost, the resulting error bound
``eps = sqrt(s / lambda_min(P0)) * delta`` and an empirical nominal
(noise-free) observer test.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dual import DualControlSequence, dual_cost, dual_rollout
from .estimators import Mode, run
from .exceptions import NotObservable, RiccatiNoConverge
from .kalman import riccati_fixed_point
from .model import (DEFAULT_TOL, observability_index, pinv, polyhedron_contains,
                    reachability_matrix, symmetrize, validate_model)
from .qp import project_onto_polyhedron


def check_monotone_cost_condition(model, tol=DEFAULT_TOL):
    """True when ``Q - P0`` is PSD (cost traces then never decrease)."""
    M = symmetrize(model.Q - model.prior_cov)
    w = np.linalg.eigvalsh(M)
    return bool(w.min() >= -tol.psd_tol * (1.0 + np.abs(w).max()))


def gain_lyapunov_matrix(model, K):
    K = np.atleast_2d(np.asarray(K, dtype=float))
    At = model.A.T + model.C.T @ K
    P0 = model.prior_cov
    return symmetrize(At.T @ P0 @ At - P0 + K.T @ model.R @ K + model.Q)


def check_gain_lyapunov_condition(model, K, tol=DEFAULT_TOL):
    """True when the closed-loop dual Lyapunov inequality holds for gain K (q x d)."""
    w = np.linalg.eigvalsh(gain_lyapunov_matrix(model, K))
    return bool(w.max() <= tol.psd_tol * (1.0 + np.abs(w).max()))


def candidate_gain(model, tol=DEFAULT_TOL, max_iter=10_000):
    """Steady-state gain of the dual regulator ``alpha = K z``.

    ``K = -(C P C' + R)^{-1} C P A'`` with P the fixed point of the
    predicted-covariance Riccati map.  A heuristic candidate only.
    """
    observability_index(model.A, model.C, tol)
    P, residual, iters = riccati_fixed_point(model, max_iter=max_iter)
    if iters >= max_iter:
        raise RiccatiNoConverge(f"Riccati iteration did not converge (residual {residual:.3e})")
    S = model.C @ P @ model.C.T + model.R
    K = -np.linalg.solve(S, model.C @ P @ model.A.T)
    return K, P


def deadbeat_policy(model, t, alpha0=None, tol=DEFAULT_TOL):
    """Dual controls that drive ``z`` to zero at the observability index.

    Returns ``(controls, s)`` where controls has horizon t (zeros appended
    after index n) and ``s`` is its trace cost with terminal weight P0.
    """
    n = observability_index(model.A, model.C, tol)
    if t < n:
        raise NotObservable(f"deadbeat needs t >= n = {n}, got t = {t}")
    d, q = model.d, model.q
    a0 = np.zeros((q, d)) if alpha0 is None else np.asarray(alpha0, dtype=float).reshape(q, d)
    Rn = reachability_matrix(model.A.T, model.C.T, n)
    An = np.linalg.matrix_power(model.A, n)
    stacked = -pinv(Rn, tol) @ An.T @ (np.eye(d) + model.C.T @ a0)
    alphas = np.zeros((t + 1, q, d))
    alphas[0] = a0
    alphas[1:n + 1] = stacked.reshape(n, q, d)
    controls = DualControlSequence(alphas)
    traj = dual_rollout(model, controls)
    s = dual_cost(model, model.prior_cov, controls, traj).trace_value
    return controls, s


def observer_error_bound(s, Sigma0, delta):
    lam = float(np.linalg.eigvalsh(np.atleast_2d(Sigma0)).min())
    return float(np.sqrt(s / lam) * delta)


def classify_trend(values, tol):
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return "nondecreasing"
    diff = np.diff(v)
    up = np.all(diff >= -tol)
    down = np.all(diff <= tol)
    if up:
        return "nondecreasing"
    if down:
        return "nonincreasing"
    return "mixed"


@dataclass
class DeltaResult:
    delta: float
    prior_mean: list
    epsilon: float
    max_error: float
    max_error_after_n: float
    final_error: float
    bound_holds: bool
    converged: bool
    cost_traces: list
    trend: str
    all_feasible: bool
    errors: list = field(default_factory=list)


@dataclass
class StabilityReport:
    mode: str
    horizon: int | None
    n: int
    cost_condition_holds: bool
    gain_condition_holds: bool | None
    candidate_gain_matrix: list | None
    deadbeat_cost: float
    lambda_min_prior: float
    results: list

    def epsilon(self, delta):
        return float(np.sqrt(self.deadbeat_cost / self.lambda_min_prior) * delta)

    def to_dict(self):
        doc = asdict(self)
        doc["bound_epsilon"] = {"formula": "sqrt(s / lambda_min(prior_cov)) * delta",
                                "s": self.deadbeat_cost, "lambda_min": self.lambda_min_prior}
        return doc

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def nominal_observer_test(model, constraint, x0, mode="CFIE", N=None, T=60,
                          delta_grid=(0.01, 0.1, 1.0), K=None, seed=0,
                          convergence_ratio=0.01, tol=DEFAULT_TOL):
    """Run an estimator on noise-free data from ``x0`` with perturbed priors.

    For each delta the prior mean is placed at distance delta from x0 in a
    seeded random direction and projected into the constraint set.  The
    report records the worst error against the deadbeat bound, the final
    error against ``convergence_ratio * delta`` and the cost-trace trend
    from ``t = n + 1`` on.
    """
    model = validate_model(model, tol)
    mode = Mode(mode)
    x0 = np.asarray(x0, dtype=float)
    n = observability_index(model.A, model.C, tol)
    _, s = deadbeat_policy(model, n, tol=tol)
    lam = float(np.linalg.eigvalsh(model.prior_cov).min())
    if K is None:
        try:
            K, _ = candidate_gain(model, tol)
        except RiccatiNoConverge:
            K = None
    gain_ok = None if K is None else check_gain_lyapunov_condition(model, K, tol)

    truth = [x0]
    for _ in range(T):
        truth.append(model.A @ truth[-1])
    truth = np.array(truth)
    Y = truth @ model.C.T

    rng = np.random.default_rng(seed)
    results = []
    for delta in delta_grid:
        direction = rng.standard_normal(model.d)
        direction /= np.linalg.norm(direction)
        prior = x0 + delta * direction
        if constraint is not None:
            prior, _ = project_onto_polyhedron(prior, constraint, tol)
        perturbed = validate_model(model.replace(prior_mean=prior), tol)
        records = run(perturbed, Y, mode, N, constraint, tol)
        errs = np.array([np.linalg.norm(r.x_hat - x) for r, x in zip(records, truth)])
        costs = [r.cost_trace for r in records]
        eps = observer_error_bound(s, model.prior_cov, delta)
        feasible = constraint is None or all(
            polyhedron_contains(constraint, r.x_hat, tol) for r in records if r.solver_status == "Optimal")
        results.append(DeltaResult(
            delta=float(delta), prior_mean=prior.tolist(), epsilon=eps,
            max_error=float(errs.max()), max_error_after_n=float(errs[n:].max(initial=0.0)),
            final_error=float(errs[-1]),
            bound_holds=bool(errs.max() <= eps + tol.solver_tol),
            converged=bool(errs[-1] <= convergence_ratio * delta + tol.solver_tol),
            cost_traces=costs, trend=classify_trend(costs[n + 1:], tol.solver_tol * (1 + max(costs))),
            all_feasible=bool(feasible), errors=errs.tolist(),
        ))
    return StabilityReport(
        mode=mode.value, horizon=N, n=n, cost_condition_holds=check_monotone_cost_condition(model, tol),
        gain_condition_holds=gain_ok,
        candidate_gain_matrix=None if K is None else np.asarray(K).tolist(),
        deadbeat_cost=float(s), lambda_min_prior=lam, results=results,
    )
