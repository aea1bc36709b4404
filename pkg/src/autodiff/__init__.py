"""
Autodiff Package.

Immutable float64 tensors, a single-owner tape, the operation set used by the
models and losses, and finite-difference gradient checking.
"""

from src.autodiff.tape import (
    AutodiffError,
    ContractError,
    DimensionError,
    Gradients,
    Node,
    Tape,
    Tensor,
    constant,
)
from src.autodiff import ops
from src.autodiff.gradcheck import grad_check, numeric_gradient, relative_error

__all__ = [
    "AutodiffError",
    "ContractError",
    "DimensionError",
    "Gradients",
    "Node",
    "Tape",
    "Tensor",
    "constant",
    "ops",
    "grad_check",
    "numeric_gradient",
    "relative_error",
]
