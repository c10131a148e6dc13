"""Sparse ODE model recovery with a GRU neural-flow network and an in-loop RK4 solver."""
__version__ = "0.1.0"

from .kernels import BACKEND
from .library import SparseODEModel, TermLibrary, build_library, check_identifiability, eval_features, model_rhs
from .ode import Trajectory, TimeSeriesDataset, adjoint_grad, rk4_step, solve
from .trainer import TrainConfig, RecoveryResult, evaluate, make_batches, ode_loss, train

__all__ = [
    "BACKEND", "SparseODEModel", "TermLibrary", "build_library", "check_identifiability", "eval_features",
    "model_rhs", "Trajectory", "TimeSeriesDataset", "adjoint_grad", "rk4_step", "solve", "TrainConfig",
    "RecoveryResult", "evaluate", "make_batches", "ode_loss", "train",
]
