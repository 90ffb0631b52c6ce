"""Forward-time dual process and the minimum-variance cost.

For control matrices ``alpha_0..alpha_L`` (each q x d) the dual state is

    z_0 = I + C^T alpha_0,    z_{i+1} = A^T z_i + C^T alpha_{i+1},

and the estimator built from a window ``y_{t-L}..y_t`` is

    x_hat = z_L^T prior_mean - sum_i alpha_i^T y_{t-i}.

``alpha_0`` always multiplies the newest measurement.  The expected
squared error of that estimator equals ``trace(z_L^T P z_L + S)`` where
``P`` is the prior covariance at the window start and ``S`` collects the
process/measurement noise stage terms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionMismatch, WindowLengthMismatch
from .model import symmetrize


@dataclass(frozen=True, eq=False)
class DualControlSequence:
    alphas: np.ndarray  # shape (L+1, q, d)

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=float)
        if a.ndim != 3:
            raise DimensionMismatch(f"alphas must have shape (L+1, q, d), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("alphas contain NaN or Inf")
        object.__setattr__(self, "alphas", a)

    @property
    def horizon(self):
        return self.alphas.shape[0] - 1

    @classmethod
    def zeros(cls, L, q, d):
        return cls(np.zeros((L + 1, q, d)))

    def __len__(self):
        return self.alphas.shape[0]


@dataclass(frozen=True, eq=False)
class DualTrajectory:
    zs: np.ndarray  # shape (L+1, d, d)

    @property
    def terminal(self):
        return self.zs[-1]


@dataclass(frozen=True, eq=False)
class CostMatrices:
    Sigma: np.ndarray
    terminal_part: np.ndarray
    stage_part: np.ndarray

    @property
    def trace_value(self):
        return float(np.trace(self.Sigma))


def _check(model, controls):
    L1, q, d = controls.alphas.shape
    if (q, d) != (model.q, model.d):
        raise DimensionMismatch(f"alphas are {q}x{d}, model needs {model.q}x{model.d}")


def dual_rollout(model, controls):
    _check(model, controls)
    At, Ct = model.A.T, model.C.T
    zs = np.empty((len(controls), model.d, model.d))
    zs[0] = np.eye(model.d) + Ct @ controls.alphas[0]
    for i in range(1, len(controls)):
        zs[i] = At @ zs[i - 1] + Ct @ controls.alphas[i]
    return DualTrajectory(zs)


def terminal_closed_form(model, controls):
    """``z_L^T = A^L + sum_i alpha_i^T C A^{L-i}`` evaluated directly."""
    _check(model, controls)
    L = controls.horizon
    powers = [np.eye(model.d)]
    for _ in range(L):
        powers.append(model.A @ powers[-1])
    zT = powers[L].copy()
    for i, a in enumerate(controls.alphas):
        zT += a.T @ model.C @ powers[L - i]
    return zT.T


def assemble_estimate(traj, controls, prior_mean, window):
    """Estimate from dual controls; ``window`` is ordered oldest to newest."""
    Y = np.atleast_2d(np.asarray(window, dtype=float))
    L1 = len(controls)
    if Y.shape[0] != L1:
        raise WindowLengthMismatch(f"window has {Y.shape[0]} measurements, controls need {L1}")
    x = traj.terminal.T @ np.asarray(prior_mean, dtype=float)
    # alpha_i pairs with y_{t-i}, i.e. the window read newest-first
    x -= np.einsum("iqd,iq->d", controls.alphas, Y[::-1])
    return x


def dual_cost(model, terminal_cov, controls, traj):
    _check(model, controls)
    P = np.asarray(terminal_cov, dtype=float)
    if P.shape != (model.d, model.d):
        raise DimensionMismatch("terminal_cov must be d x d")
    zL = traj.terminal
    terminal = zL.T @ P @ zL
    a = controls.alphas
    stage = np.einsum("iqd,qr,ire->de", a, model.R, a)
    z = traj.zs[:-1]
    if z.shape[0]:
        stage = stage + np.einsum("ida,db,ibe->ae", z, model.Q, z)
    terminal, stage = symmetrize(terminal), symmetrize(stage)
    return CostMatrices(terminal + stage, terminal, stage)


def affine_dual_maps(A, C, L):
    """Affine form of the dual states in one column of the controls.

    Column k of ``z_i`` equals ``offsets[i] @ e_k + maps[i] @ u_k`` where
    ``u_k`` stacks column k of ``alpha_0..alpha_L``.  Returns ``offsets``
    with shape (L+1, d, d) holding ``(A^T)^i`` and ``maps`` with shape
    (L+1, d, q(L+1)).
    """
    A = np.asarray(A, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    q, d = C.shape
    At = A.T
    offsets = np.empty((L + 1, d, d))
    maps = np.zeros((L + 1, d, q * (L + 1)))
    offsets[0] = np.eye(d)
    # blocks[k] = (A^T)^k C^T
    blocks = [C.T]
    for k in range(1, L + 1):
        offsets[k] = At @ offsets[k - 1]
        blocks.append(At @ blocks[-1])
    for i in range(L + 1):
        for j in range(i + 1):
            maps[i, :, j * q:(j + 1) * q] = blocks[i - j]
    return offsets, maps
