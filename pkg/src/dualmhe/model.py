"""System, noise and constraint definitions plus structural linear algebra.

The plant is the autonomous LTI system

    x_{t+1} = A x_t + w_t,    y_t = C x_t + v_t,

with w ~ (0, Q), v ~ (0, R) and x_0 ~ (prior_mean, prior_cov).  State
constraints are polyhedral, ``{x : H x <= h}``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DimensionMismatch, NotObservable, NotPD, NotPSD


@dataclass(frozen=True)
class ToleranceConfig:
    """Numerical slack used throughout the package.

    ``psd_tol`` is relative: a symmetric matrix passes a PSD test when its
    smallest eigenvalue is at least ``-psd_tol * (1 + max|eig|)``.
    """

    rank_tol: float = 1e-10
    psd_tol: float = 1e-9
    feas_tol: float = 1e-8
    solver_tol: float = 1e-8

    def __post_init__(self):
        for name in ("rank_tol", "psd_tol", "feas_tol", "solver_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


DEFAULT_TOL = ToleranceConfig()


def _frozen(a, ndim=None, name="array"):
    arr = np.array(a, dtype=float)
    if ndim == 2 and arr.ndim < 2:
        arr = np.atleast_2d(arr)
    if ndim == 1:
        arr = arr.reshape(-1)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionMismatch(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    arr.setflags(write=False)
    return arr


def symmetrize(M):
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + M.T)


def is_psd(M, tol=DEFAULT_TOL):
    eigmin, slack = _eig_slack(M, tol)
    return eigmin >= -slack


def _eig_slack(M, tol):
    w = np.linalg.eigvalsh(symmetrize(M))
    return w.min(), tol.psd_tol * (1.0 + np.abs(w).max())


@dataclass(frozen=True, eq=False)
class PolyhedralSet:
    """The set ``{x : H x <= h}``.  Equalities must be given as two rows."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = _frozen(self.H, 2, "H")
        h = _frozen(self.h, 1, "h")
        if H.shape[0] < 1 or H.shape[0] != h.shape[0]:
            raise DimensionMismatch(f"H has {H.shape[0]} rows but h has length {h.shape[0]}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @property
    def dim(self):
        return self.H.shape[1]

    @property
    def n_rows(self):
        return self.H.shape[0]

    @classmethod
    def nonnegative_orthant(cls, d):
        return cls(-np.eye(d), np.zeros(d))

    @classmethod
    def box(cls, lower, upper):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        d = lower.size
        return cls(np.vstack([np.eye(d), -np.eye(d)]), np.concatenate([upper, -lower]))

    def violation(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"point has dimension {x.shape[-1]}, set has {self.dim}")
        return x @ self.H.T - self.h

    def to_dict(self):
        return {"H": self.H.tolist(), "h": self.h.tolist()}


@dataclass(frozen=True, eq=False)
class SystemModel:
    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray

    def __post_init__(self):
        for name, nd in (("A", 2), ("C", 2), ("Q", 2), ("R", 2), ("prior_mean", 1), ("prior_cov", 2)):
            object.__setattr__(self, name, _frozen(getattr(self, name), nd, name))

    @property
    def d(self):
        return self.A.shape[0]

    @property
    def q(self):
        return self.C.shape[0]

    def replace(self, **changes):
        fields = {k: getattr(self, k) for k in ("A", "C", "Q", "R", "prior_mean", "prior_cov")}
        fields.update(changes)
        return SystemModel(**fields)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("A", "C", "Q", "R", "prior_mean", "prior_cov")}


@dataclass(frozen=True, eq=False)
class ValidatedModel(SystemModel):
    """A :class:`SystemModel` whose covariance invariants have been checked."""

    tol: ToleranceConfig = field(default=DEFAULT_TOL)


def _check_dims(m):
    d = m.A.shape[0]
    if m.A.shape != (d, d):
        raise DimensionMismatch(f"A must be square, got {m.A.shape}")
    if m.C.shape[1] != d:
        raise DimensionMismatch(f"C must have {d} columns, got {m.C.shape}")
    q = m.C.shape[0]
    for name, shape in (("Q", (d, d)), ("R", (q, q)), ("prior_cov", (d, d))):
        if getattr(m, name).shape != shape:
            raise DimensionMismatch(f"{name} must be {shape}, got {getattr(m, name).shape}")
    if m.prior_mean.shape != (d,):
        raise DimensionMismatch(f"prior_mean must have length {d}")


def validate_model(model, tol=DEFAULT_TOL):
    """Check dimensions and definiteness, returning a :class:`ValidatedModel`.

    Q, R and the prior covariance are symmetrized before the eigenvalue
    tests.  Q may be singular; R and the prior covariance must be PD.
    Validating an already validated model returns it unchanged.
    """
    if isinstance(model, ValidatedModel):
        return model
    _check_dims(model)
    Q, R, P0 = symmetrize(model.Q), symmetrize(model.R), symmetrize(model.prior_cov)
    eigmin, slack = _eig_slack(Q, tol)
    if eigmin < -slack:
        raise NotPSD("Q", eigmin)
    for name, M in (("R", R), ("prior_cov", P0)):
        eigmin, slack = _eig_slack(M, tol)
        if eigmin <= slack:
            raise NotPD(name, eigmin)
    return ValidatedModel(model.A, model.C, Q, R, model.prior_mean, P0, tol=tol)


def _rank(M, tol):
    s = np.linalg.svd(np.atleast_2d(M), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol.rank_tol * s[0]))


def pinv(M, tol=DEFAULT_TOL):
    """Moore-Penrose pseudoinverse with a relative singular-value cutoff."""
    return np.linalg.pinv(np.asarray(M, dtype=float), rcond=tol.rank_tol)


def reachability_matrix(A, B, t):
    """``[A^{t-1} B, ..., A B, B]``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    d = A.shape[0]
    if A.shape != (d, d) or B.shape[0] != d:
        raise DimensionMismatch(f"incompatible shapes A{A.shape}, B{B.shape}")
    if t < 1:
        raise ValueError("t must be a positive integer")
    blocks = [B]
    for _ in range(t - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks[::-1])


def observability_index(A, C, tol=DEFAULT_TOL):
    """Smallest n with rank R_n(A^T, C^T) = d."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d = A.shape[0]
    if A.shape != (d, d) or C.shape[1] != d:
        raise DimensionMismatch(f"incompatible shapes A{A.shape}, C{C.shape}")
    for n in range(1, d + 1):
        if _rank(reachability_matrix(A.T, C.T, n), tol) == d:
            return n
    raise NotObservable(f"rank of the {d}-step observability matrix is below {d}")


def polyhedron_contains(constraint, x, tol=DEFAULT_TOL):
    return bool(np.max(constraint.violation(x)) <= tol.feas_tol)


def load_model(path):
    """Read a model JSON file; returns ``(SystemModel, PolyhedralSet | None)``."""
    return model_from_dict(json.loads(Path(path).read_text()))


def model_from_dict(doc):
    def arr(key):
        if key not in doc:
            raise KeyError(f"model document is missing '{key}'")
        a = np.array(doc[key], dtype=float)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"'{key}' contains NaN or Inf")
        return a

    model = SystemModel(
        A=arr("A"), C=arr("C"), Q=arr("Q"), R=arr("R"),
        prior_mean=arr("prior_mean"), prior_cov=arr("prior_cov"),
    )
    constraint = None
    if doc.get("constraint") is not None:
        constraint = PolyhedralSet(doc["constraint"]["H"], doc["constraint"]["h"])
    return model, constraint


def dump_model(model, constraint=None):
    doc = model.to_dict()
    doc["constraint"] = None if constraint is None else constraint.to_dict()
    return doc


def batch_reactor():
    """Isothermal batch reactor benchmark with the nonnegativity constraint."""
    A = np.array([
        [0.8831, 0.0078, 0.0022],
        [0.1150, 0.9563, 0.0028],
        [0.1178, 0.0102, 0.9954],
    ])
    model = SystemModel(
        A=A,
        C=np.full((1, 3), 32.84),
        Q=0.01**2 * np.eye(3),
        R=np.array([[0.25**2]]),
        prior_mean=np.array([1.0, 1.0, 4.0]),
        prior_cov=np.eye(3),
    )
    return validate_model(model), PolyhedralSet.nonnegative_orthant(3)
