"""
Finite-difference gradient checking.

Central differences (f(x + h e_i) - f(x - h e_i)) / 2h against the reverse-mode
gradient, coordinate by coordinate.
"""

from typing import Callable

import numpy as np

from src.autodiff.tape import ContractError, Tape, Tensor

ScalarFn = Callable[[Tensor], Tensor]


def numeric_gradient(fn: ScalarFn, point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``fn`` evaluated on constants."""
    if h <= 0:
        raise ContractError(f"Finite-difference step must be positive, got {h}")
    base = np.array(point, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = fn(Tensor(base)).item()
        flat[i] = original - h
        f_minus = fn(Tensor(base)).item()
        flat[i] = original
        grad_flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def analytic_gradient(fn: ScalarFn, point: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of ``fn`` at ``point``."""
    tape = Tape()
    leaf = tape.leaf(point, name="point")
    root = fn(leaf)
    return tape.backward(root)[leaf]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """
    Largest coordinate-wise relative error.

    Each coordinate is normalized by the larger of its own magnitudes and the
    gradient's max-norm, so near-zero coordinates are judged against the
    overall gradient scale.
    """
    scale_floor = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale_floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(fn: ScalarFn, point: np.ndarray, h: float = 1e-5) -> float:
    """
    Compare backward() against central differences.

    Args:
        fn: Map from a tensor to a scalar tensor, built from differentiable ops
        point: Where to evaluate
        h: Finite-difference step

    Returns:
        Maximum relative error over all coordinates
    """
    analytic = analytic_gradient(fn, point)
    numeric = numeric_gradient(fn, point, h)
    return relative_error(analytic, numeric)
