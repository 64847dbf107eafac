"""Adapt pre-trained neural surrogates of dynamical systems to related target
systems with scarce data.

Subset Extended Kalman Filter finetuning is compared against subset-Adam and
L-BFGS finetuning and against retraining from a random initialization.
"""
from ._backend import BACKEND
from .errors import ContractError, DivergenceError
from .nn_core import NetworkSpec, forward, init_params, jacobian_params, param_count

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ContractError",
    "DivergenceError",
    "NetworkSpec",
    "forward",
    "init_params",
    "jacobian_params",
    "param_count",
]
