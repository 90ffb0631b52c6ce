"""Kalman filter in update-first form.

The first measurement ``y_0`` is taken at the initial prior, so
:func:`kf_run` alternates update, predict, update, ... and returns the
posterior belief after each measurement.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import DimensionMismatch, SingularInnovation
from .model import symmetrize


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(f"cov shape {cov.shape} does not match mean length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


def prior_belief(model):
    return GaussianBelief(model.prior_mean, model.prior_cov)


def kf_predict(belief, model):
    if belief.mean.size != model.d:
        raise DimensionMismatch("belief dimension does not match model")
    A = model.A
    return GaussianBelief(A @ belief.mean, symmetrize(A @ belief.cov @ A.T + model.Q))


def kalman_gain(cov_minus, model):
    """Gain ``P C^T (C P C^T + R)^{-1}`` via a Cholesky solve."""
    C = model.C
    S = symmetrize(C @ cov_minus @ C.T + model.R)
    try:
        cho = scipy.linalg.cho_factor(S)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation("innovation covariance C P C^T + R is not positive definite") from exc
    return scipy.linalg.cho_solve(cho, C @ cov_minus).T


def kf_update(belief_minus, y, model):
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != model.q:
        raise DimensionMismatch(f"measurement has length {y.size}, expected {model.q}")
    P = belief_minus.cov
    K = kalman_gain(P, model)
    mean = belief_minus.mean + K @ (y - model.C @ belief_minus.mean)
    cov = symmetrize(P - K @ model.C @ P)
    return GaussianBelief(mean, cov)


def joseph_update_cov(cov_minus, model):
    """Joseph-form posterior covariance, used as a conditioning cross-check."""
    K = kalman_gain(cov_minus, model)
    I_KC = np.eye(model.d) - K @ model.C
    return symmetrize(I_KC @ cov_minus @ I_KC.T + K @ model.R @ K.T)


def kf_run(model, measurements, prior=None):
    """Filter a measurement sequence ``y_0..y_T``; returns posterior beliefs."""
    Y = np.asarray(measurements, dtype=float)
    if Y.ndim == 1:
        Y = Y.reshape(-1, model.q)
    if Y.shape[0] == 0:
        raise ValueError("measurements must be nonempty")
    belief = prior_belief(model) if prior is None else prior
    out = []
    for t, y in enumerate(Y):
        if t > 0:
            belief = kf_predict(belief, model)
        belief = kf_update(belief, y, model)
        out.append(belief)
    return out


def riccati_fixed_point(model, max_iter=10_000, tol=1e-12):
    """Iterate the predicted-covariance Riccati map to its fixed point.

    Returns ``(P_minus, residual, iterations)``.  ``residual`` is the max
    absolute change in the last iteration.
    """
    P = np.array(model.prior_cov, dtype=float)
    for it in range(1, max_iter + 1):
        post = kf_update(GaussianBelief(np.zeros(model.d), P), np.zeros(model.q), model).cov
        P_next = symmetrize(model.A @ post @ model.A.T + model.Q)
        residual = np.abs(P_next - P).max()
        P = P_next
        if residual <= tol * (1.0 + np.abs(P).max()):
            return P, residual, it
    return P, residual, max_iter
