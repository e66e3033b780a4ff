"""Minimal reverse-mode automatic differentiation over numpy arrays."""
from .gradcheck import GradCheckReport, grad_check, grad_check_params
from .optim import Adam
from .tensor import ComputationRecord, Tensor, as_tensor, parameter

__all__ = [
    "Adam",
    "ComputationRecord",
    "GradCheckReport",
    "Tensor",
    "as_tensor",
    "grad_check",
    "grad_check_params",
    "parameter",
]
