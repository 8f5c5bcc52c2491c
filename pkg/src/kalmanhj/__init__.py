"""Kalman-frame geometry, minimum-energy controls and value-function regularity experiments."""
from .config import ExperimentConfig, preset_frame
from .control import ControlProblemSpec, MinEnergyCost, gramian_cost_q2, min_energy_cost
from .curved import build_curved_family, cone_set, concatenated_psi, jacobian_profile
from .errors import KalmanHJError
from .hj_solver import GridFunction, GridSpec, HJProblem, ParabolicBoundary, SemiLagrangianHJ, solve_value
from .kalman_geometry import KalmanDecomposition, KalmanFrame, build_frame, check_kalman_rank, rescaled_drift
from .regularity import HolderExponentEstimator, holder_fit, oscillation, oscillation_iteration
from .scaling import Cylinder, ScaleParams, SpaceTimePoint, gauge_rho, group_op, modulus_omega

__all__ = [
    "ControlProblemSpec", "Cylinder", "ExperimentConfig", "GridFunction", "GridSpec", "HJProblem",
    "HolderExponentEstimator", "KalmanDecomposition", "KalmanFrame", "KalmanHJError", "MinEnergyCost",
    "ParabolicBoundary", "ScaleParams", "SemiLagrangianHJ", "SpaceTimePoint", "build_curved_family",
    "build_frame", "check_kalman_rank", "concatenated_psi", "cone_set", "gauge_rho", "gramian_cost_q2",
    "group_op", "holder_fit", "jacobian_profile", "min_energy_cost", "modulus_omega", "oscillation",
    "oscillation_iteration", "preset_frame", "rescaled_drift", "solve_value",
]
