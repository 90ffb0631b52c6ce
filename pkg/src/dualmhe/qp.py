"""Dual QP assembly and a dense primal active-set solver.

The dual problems are written over ``u``, the stacked control matrices
ordered column-major: for each column k of the alphas, for each time
index i, the q entries of ``alpha_i[:, k]``.  The trace objective splits
into d independent quadratic forms (one per column) so the Hessian is
block diagonal with d identical blocks; the constraint rows couple the
columns through H.

Problems take the form ``min 1/2 u'Hu + c'u + const  s.t.  G u <= g``.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .dual import DualControlSequence, affine_dual_maps
from .exceptions import DimensionMismatch
from .model import DEFAULT_TOL, symmetrize

logger = logging.getLogger(__name__)


class QpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITERATIONS = "MaxIterations"


@dataclass(eq=False)
class QpProblem:
    hessian_blocks: list
    linear_terms: list
    G: np.ndarray
    g: np.ndarray
    constant: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hessian_blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in self.hessian_blocks]
        self.linear_terms = [np.asarray(c, dtype=float).reshape(-1) for c in self.linear_terms]
        if len(self.hessian_blocks) != len(self.linear_terms):
            raise DimensionMismatch("need one linear term per Hessian block")
        for b, c in zip(self.hessian_blocks, self.linear_terms):
            if b.shape != (c.size, c.size):
                raise DimensionMismatch(f"Hessian block {b.shape} does not match linear term {c.size}")
        n = self.n_vars
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        if self.G.shape[0] != self.g.size:
            raise DimensionMismatch("G and g row counts differ")
        if not (np.all(np.isfinite(self.G)) and np.all(np.isfinite(self.g))):
            raise ValueError("constraint data must be finite")

    @classmethod
    def dense(cls, H, c, G=None, g=None, constant=0.0):
        c = np.asarray(c, dtype=float).reshape(-1)
        if G is None:
            G, g = np.zeros((0, c.size)), np.zeros(0)
        return cls([symmetrize(H)], [c], G, g, constant)

    @property
    def n_vars(self):
        return sum(c.size for c in self.linear_terms)

    @property
    def n_rows(self):
        return self.g.size

    def hessian(self):
        return scipy.linalg.block_diag(*self.hessian_blocks)

    def linear(self):
        return np.concatenate(self.linear_terms)

    def objective(self, u):
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.hessian() @ u + self.linear() @ u + self.constant)

    def to_dict(self):
        return {
            "hessian_blocks": [b.tolist() for b in self.hessian_blocks],
            "linear_terms": [c.tolist() for c in self.linear_terms],
            "G": self.G.tolist(),
            "g": self.g.tolist(),
            "constant": self.constant,
            "metadata": self.metadata,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, doc):
        n = sum(len(c) for c in doc["linear_terms"])
        G = np.array(doc["G"], dtype=float).reshape(-1, n)
        return cls(doc["hessian_blocks"], doc["linear_terms"], G, doc["g"],
                   doc.get("constant", 0.0), doc.get("metadata", {}))


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal_violation: float
    complementarity: float
    multipliers: np.ndarray = field(repr=False)


@dataclass(eq=False)
class QpSolution:
    u: np.ndarray
    status: QpStatus
    objective_value: float
    active_rows: tuple
    kkt: KktResiduals | None = None
    iterations: int = 0
    certificate: np.ndarray | None = None
    alphas: DualControlSequence | None = None

    @property
    def optimal(self):
        return self.status is QpStatus.OPTIMAL


def alphas_from_vector(u, L, q, d):
    """Inverse of the column-major stacking used by the dual QPs."""
    return np.asarray(u, dtype=float).reshape(d, L + 1, q).transpose(1, 2, 0)


def vector_from_alphas(alphas):
    return np.asarray(alphas, dtype=float).transpose(2, 0, 1).reshape(-1)


# ---------------------------------------------------------------------------
# assembly


def fie_lags(t, n):
    """Lags j of the lagged-estimate constraints imposed at time t."""
    return [0] if t <= n else list(range(t - n + 1))


def build_dual_qp(model, terminal_cov, prior_mean, window, constraint=None, lags=(0,)):
    """Assemble the trace-cost dual QP over a measurement window.

    ``window`` holds ``y_{t-L}..y_t`` oldest first.  For every lag j the
    estimate at time ``t - j``, built from ``alpha_0..alpha_{L-j}`` and
    ``y_{t-L}..y_{t-j}``, is constrained to the polyhedron.
    """
    Y = np.asarray(window, dtype=float)
    if Y.ndim == 1:
        Y = Y.reshape(-1, model.q)
    if Y.shape[1] != model.q:
        raise DimensionMismatch(f"measurements must have length {model.q}")
    L = Y.shape[0] - 1
    if L < 0:
        raise DimensionMismatch("window must hold at least one measurement")
    d, q = model.d, model.q
    P = np.asarray(terminal_cov, dtype=float)
    xbar = np.asarray(prior_mean, dtype=float).reshape(-1)
    if P.shape != (d, d) or xbar.size != d:
        raise DimensionMismatch("terminal_cov / prior_mean do not match the model")

    offsets, maps = affine_dual_maps(model.A, model.C, L)
    ML, aL = maps[L], offsets[L]
    Hb = ML.T @ P @ ML + np.kron(np.eye(L + 1), model.R)
    C_lin = ML.T @ P @ aL
    const = float(np.trace(aL.T @ P @ aL))
    if L > 0:
        Mi, ai = maps[:L], offsets[:L]
        Hb += np.einsum("ian,ab,ibm->nm", Mi, model.Q, Mi)
        C_lin += np.einsum("ian,ab,ibk->nk", Mi, model.Q, ai)
        const += float(np.einsum("iak,ab,ibk->", ai, model.Q, ai))
    Hb = symmetrize(2.0 * Hb)
    blocks = [Hb] * d
    linear = [2.0 * C_lin[:, k] for k in range(d)]

    nb = q * (L + 1)
    rows, rhs, provenance = [], [], []
    if constraint is not None:
        if constraint.dim != d:
            raise DimensionMismatch("constraint dimension does not match the model")
        Y_newest = Y[::-1]
        for j in lags:
            if not 0 <= j <= L:
                raise ValueError(f"lag {j} outside window of length {L + 1}")
            i_end = L - j
            gvec = maps[i_end].T @ xbar
            gvec[: q * (i_end + 1)] -= Y_newest[j:j + i_end + 1].reshape(-1)
            b = offsets[i_end].T @ xbar
            rows.append(np.kron(constraint.H, gvec))
            rhs.append(constraint.h - constraint.H @ b)
            provenance.extend((j, r) for r in range(constraint.n_rows))
    G = np.vstack(rows) if rows else np.zeros((0, d * nb))
    g = np.concatenate(rhs) if rhs else np.zeros(0)
    meta = {"L": L, "d": d, "q": q, "row_lag": [p[0] for p in provenance],
            "row_index": [p[1] for p in provenance], "ordering": "column,time,row"}
    return QpProblem(blocks, linear, G, g, const, meta)


def build_fie_qp(model, constraint, measurements, t, n):
    """Full-information dual QP at time t (measurements ``y_0..y_t``)."""
    Y = np.asarray(measurements, dtype=float).reshape(-1, model.q)
    if Y.shape[0] != t + 1:
        raise DimensionMismatch(f"need {t + 1} measurements at time {t}, got {Y.shape[0]}")
    return build_dual_qp(model, model.prior_cov, model.prior_mean, Y, constraint, fie_lags(t, n))


def build_mhe_qp(model, constraint, window, prior_mean, terminal_cov, N):
    Y = np.asarray(window, dtype=float).reshape(-1, model.q)
    if Y.shape[0] != N + 1:
        raise DimensionMismatch(f"window must hold N+1 = {N + 1} measurements")
    return build_dual_qp(model, terminal_cov, prior_mean, Y, constraint, [0])


# ---------------------------------------------------------------------------
# solver


def unconstrained_minimizer(problem, method="blockwise"):
    if method == "blockwise":
        parts = []
        for Hb, cb in zip(problem.hessian_blocks, problem.linear_terms):
            parts.append(-scipy.linalg.cho_solve(scipy.linalg.cho_factor(Hb), cb))
        return np.concatenate(parts)
    if method == "dense":
        return -np.linalg.solve(problem.hessian(), problem.linear())
    raise ValueError(f"unknown method {method!r}")


def _eqp(H, c, G, g, W):
    """Minimize 1/2 u'Hu + c'u subject to G[W] u = g[W]; returns (u, lambda)."""
    n = c.size
    if not W:
        return -np.linalg.solve(H, c), np.zeros(0)
    A = G[W]
    K = np.block([[H, A.T], [A, np.zeros((len(W), len(W)))]])
    rhs = np.concatenate([-c, g[W]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _independent_subset(G, candidates, tol):
    """Greedy linearly independent subset of rows, preserving order."""
    chosen = []
    for i in candidates:
        trial = G[chosen + [i]]
        s = np.linalg.svd(trial, compute_uv=False)
        if s[-1] > tol * max(1.0, s[0]):
            chosen.append(i)
    return chosen


def _phase1(G, g):
    """Minimize the max violation of G u <= g.  Returns (u, s, farkas_ray)."""
    m, n = G.shape
    res = scipy.optimize.linprog(
        c=np.r_[np.zeros(n), 1.0],
        A_ub=np.hstack([G, -np.ones((m, 1))]),
        b_ub=g,
        bounds=[(None, None)] * n + [(0.0, None)],
        method="highs",
    )
    if res.status != 0:
        raise RuntimeError(f"phase-1 LP failed: {res.message}")
    ray = -np.asarray(res.ineqlin.marginals)
    return res.x[:n], float(res.x[n]), ray


def solve_qp(problem, tol=DEFAULT_TOL, warm_start=None, max_iter=None):
    """Primal active-set solve of a strictly convex QP.

    ``warm_start`` is an optional iterable of row indices believed active
    at the optimum; it is used only if the equality-constrained point it
    defines is feasible.  Returns a :class:`QpSolution`; infeasibility
    is reported through the status and a Farkas ray
    (``y >= 0, G'y = 0, g'y < 0``) in ``certificate``.
    """
    H = problem.hessian()
    c = problem.linear()
    G, g = problem.G, problem.g
    m, n = G.shape
    if max_iter is None:
        max_iter = 10 * (n + m) + 50
    step_tol = 1e-12

    u = unconstrained_minimizer(problem)
    W = []
    it = 0
    if m and np.max(G @ u - g) > tol.feas_tol:
        start = None
        if warm_start:
            W0 = _independent_subset(G, sorted(set(int(i) for i in warm_start if 0 <= int(i) < m)), 1e-10)
            u0, _ = _eqp(H, c, G, g, W0)
            if np.max(G @ u0 - g) <= tol.feas_tol:
                start = (u0, W0)
        if start is None:
            uf, s, ray = _phase1(G, g)
            if s > tol.feas_tol:
                logger.debug("QP infeasible: phase-1 violation %.3e", s)
                return _finish(problem, uf, QpStatus.INFEASIBLE, [], tol, 0, certificate=ray)
            slack = G @ uf - g
            near = [int(i) for i in np.argsort(-slack) if slack[i] >= -tol.feas_tol]
            start = (uf, _independent_subset(G, near, 1e-10)[:n])
        u, W = start

        converged = False
        while it < max_iter:
            it += 1
            u_eq, lam = _eqp(H, c, G, g, W)
            p = u_eq - u
            if np.max(np.abs(p)) <= step_tol * (1.0 + np.max(np.abs(u))):
                u = u_eq
                if not W or lam.min() >= -tol.solver_tol * (1.0 + np.abs(lam).max()):
                    converged = True
                    break
                W.pop(int(np.argmin(lam)))
                continue
            Gp = G @ p
            slack = g - G @ u
            step, block = 1.0, None
            in_W = set(W)
            for i in np.flatnonzero(Gp > 1e-14 * (1.0 + np.abs(G).max() * np.abs(p).max())):
                if i in in_W:
                    continue
                ratio = max(slack[i], 0.0) / Gp[i]
                if ratio < step:
                    step, block = ratio, int(i)
            u = u + step * p
            if block is not None:
                W.append(block)
        if not converged:
            return _finish(problem, u, QpStatus.MAX_ITERATIONS, W, tol, it)
    return _finish(problem, u, QpStatus.OPTIMAL, W, tol, it)


def _finish(problem, u, status, W, tol, it, certificate=None):
    meta = problem.metadata
    alphas = None
    if {"L", "q", "d"} <= meta.keys():
        alphas = DualControlSequence(alphas_from_vector(u, meta["L"], meta["q"], meta["d"]))
    sol = QpSolution(u=u, status=status, objective_value=problem.objective(u),
                     active_rows=tuple(sorted(W)), iterations=it,
                     certificate=certificate, alphas=alphas)
    sol.kkt = kkt_residuals(problem, sol)
    if status is QpStatus.OPTIMAL:
        scale = 1.0 + np.abs(problem.linear()).max(initial=0.0)
        if sol.kkt.primal_violation > tol.feas_tol or sol.kkt.stationarity > tol.solver_tol * scale:
            logger.warning("active-set result failed the KKT check: %s", sol.kkt)
            sol.status = QpStatus.MAX_ITERATIONS
    return sol


def kkt_residuals(problem, solution):
    """Stationarity, primal violation and complementarity at a solution.

    Multipliers are recovered by nonnegative least squares over the
    solution's active rows.
    """
    u = np.asarray(solution.u, dtype=float)
    H, c, G, g = problem.hessian(), problem.linear(), problem.G, problem.g
    grad = H @ u + c
    lam = np.zeros(problem.n_rows)
    rows = list(solution.active_rows)
    if rows:
        lam[rows], _ = scipy.optimize.nnls(G[rows].T, -grad)
    r = G @ u - g
    stationarity = float(np.abs(grad + G.T @ lam).max(initial=0.0))
    violation = float(np.maximum(r, 0.0).max(initial=0.0))
    comp = float(np.abs(lam * r).max(initial=0.0))
    return KktResiduals(stationarity, violation, comp, lam)


def project_onto_polyhedron(x, constraint, tol=DEFAULT_TOL):
    """Euclidean projection of x onto the polyhedron (a small QP)."""
    x = np.asarray(x, dtype=float)
    if np.max(constraint.violation(x)) <= tol.feas_tol:
        return x.copy(), None
    problem = QpProblem.dense(2.0 * np.eye(x.size), -2.0 * x, constraint.H, constraint.h,
                              constant=float(x @ x))
    sol = solve_qp(problem, tol)
    return sol.u, sol
