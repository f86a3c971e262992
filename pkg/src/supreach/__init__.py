"""Sup-norm neural value functions for HJI reachability, with a grid oracle to check them."""
from .analysis import GridValue, NetworkValue, brt_compare, convergence_series, estimate_Cf, sup_error
from .estimators import DeepReachRegressor, HJIGridSolver
from .gridoracle import GridSpec, extract_brt, solve_hji
from .problem import ProblemSpec, dynamics, hamiltonian_closed_form, target_margin
from .rollout import integrate, verify_brt_semantics
from .sirennet import Checkpoint, NetworkArch, load_checkpoint, save_checkpoint
from .training import TrainConfig, fine_tune, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DeepReachRegressor",
    "GridSpec",
    "GridValue",
    "HJIGridSolver",
    "NetworkArch",
    "NetworkValue",
    "ProblemSpec",
    "TrainConfig",
    "brt_compare",
    "convergence_series",
    "dynamics",
    "estimate_Cf",
    "extract_brt",
    "fine_tune",
    "hamiltonian_closed_form",
    "integrate",
    "load_checkpoint",
    "save_checkpoint",
    "solve_hji",
    "sup_error",
    "target_margin",
    "train",
    "verify_brt_semantics",
]
