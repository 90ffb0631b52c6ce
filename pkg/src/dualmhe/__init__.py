"""Minimum-variance constrained state estimation via estimation-control duality."""

__version__ = "0.1.0"

from .dual import (CostMatrices, DualControlSequence, DualTrajectory, assemble_estimate,
                   dual_cost, dual_rollout)
from .estimators import (DualMHE, EstimateRecord, EstimatorState, KalmanFilterEstimator, Mode,
                         fie_fast_path, propagate_prior, run, step)
from .kalman import GaussianBelief, kf_predict, kf_run, kf_update
from .memhe import MinEnergyMHE, memhe_step
from .model import (PolyhedralSet, SystemModel, ToleranceConfig, ValidatedModel, batch_reactor,
                    observability_index, polyhedron_contains, reachability_matrix, validate_model)
from .qp import QpProblem, QpSolution, QpStatus, build_fie_qp, build_mhe_qp, kkt_residuals, solve_qp

__all__ = [
    "CostMatrices", "DualControlSequence", "DualTrajectory", "assemble_estimate", "dual_cost",
    "dual_rollout", "DualMHE", "EstimateRecord", "EstimatorState", "KalmanFilterEstimator",
    "Mode", "fie_fast_path", "propagate_prior", "run", "step", "GaussianBelief", "kf_predict",
    "kf_run", "kf_update", "MinEnergyMHE", "memhe_step", "PolyhedralSet", "SystemModel",
    "ToleranceConfig", "ValidatedModel", "batch_reactor", "observability_index",
    "polyhedron_contains", "reachability_matrix", "validate_model", "QpProblem", "QpSolution",
    "QpStatus", "build_fie_qp", "build_mhe_qp", "kkt_residuals", "solve_qp",
]
