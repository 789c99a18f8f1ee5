"""6-DoF powered-landing guidance by successive convexification, warm-started
by a learned trajectory generator."""

from .dynamics import BoundaryConditions, ProblemBounds, State, VehicleParams, euler_to_quat
from .discretization import ReferenceTrajectory
from .scp import ScpConfig, ScpResult, run_scp, straight_line_init
from .subproblem import GuidanceProblem, ScpWeights

__all__ = [
    "BoundaryConditions",
    "GuidanceProblem",
    "ProblemBounds",
    "ReferenceTrajectory",
    "ScpConfig",
    "ScpResult",
    "ScpWeights",
    "State",
    "VehicleParams",
    "euler_to_quat",
    "run_scp",
    "straight_line_init",
]

__version__ = "0.1.0"
