"""
Input-Space Loss Landscape

Jacobians of logits and log-probabilities with respect to one input, the
input-space Fisher information matrix, the exact Hessian of softmax
cross-entropy (J^T (diag p - p p^T) J, no second-order differentiation),
Gaussian-noise KL expectations against their second-order values, the
gradient-norm identity, the first/second-order loss-change bound, and the
eigenvalue and trace estimators used by the curvature report.

Dense d x d objects are limited to d <= 256 by default; ``fim_trace`` and
``hutchinson_trace`` work at any dimension.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.autodiff import ops
from src.autodiff.tape import Tape, Tensor
from src.models import ParamSet, forward
from src.rng import STREAM_ANALYSIS, NoiseStream

logger = logging.getLogger(__name__)

DEFAULT_DIM_CAP = 256
POWER_ITERATIONS = 200
POWER_TOL = 1e-10
POWER_SEED = 0
POWER_RESTARTS = 8
MC_CHUNK = 2048


class LandscapeError(Exception):
    """Raised on invalid landscape inputs."""

    pass


class InputSizeError(LandscapeError):
    """Raised when a dense d x d object would exceed the dimension cap."""

    pass


def _example(params: ParamSet, x: np.ndarray, cap: Optional[int]) -> np.ndarray:
    """One example as a (1, *input_shape) batch."""
    spec = params.spec
    x = np.asarray(x, dtype=np.float64)
    if x.size != spec.input_dim:
        raise LandscapeError(
            f"Input of shape {x.shape} does not match model input {tuple(spec.input_shape)}"
        )
    if cap is not None and spec.input_dim > cap:
        raise InputSizeError(f"Input dimension {spec.input_dim} exceeds the cap of {cap}")
    return x.reshape((1,) + tuple(spec.input_shape))


def _label(params: ParamSet, y: int) -> int:
    k = params.spec.num_classes
    if not 0 <= int(y) < k:
        raise LandscapeError(f"Label {y} outside [0, {k})")
    return int(y)


def _rows(params: ParamSet, x: np.ndarray, log_space: bool) -> Tuple[np.ndarray, np.ndarray]:
    """K reverse passes; returns (K x d rows, output vector at x)."""
    spec = params.spec
    tape = Tape()
    point = tape.leaf(x, name="x")
    out = forward(spec, params.constants(), point)
    if log_space:
        out = ops.log_softmax(out)
    rows = np.empty((spec.num_classes, spec.input_dim))
    for k in range(spec.num_classes):
        rows[k] = tape.backward(ops.take(out, (0, k)))[point].reshape(-1)
    return rows, out.data[0]


@dataclass(frozen=True)
class LogProbJacobian:
    """
    Attributes:
        rows: K x d, row k is the input gradient of log p_k
        probs: Class probabilities p at the input
    """

    rows: np.ndarray
    probs: np.ndarray

    def weighted_row_sum(self) -> np.ndarray:
        """sum_k p_k grad log p_k; zero because the probabilities sum to one."""
        return self.probs @ self.rows


def logit_jacobian(
    params: ParamSet, x: np.ndarray, cap: Optional[int] = DEFAULT_DIM_CAP
) -> Tuple[np.ndarray, np.ndarray]:
    """(K x d Jacobian of the logits, logits) at one input."""
    return _rows(params, _example(params, x, cap), log_space=False)


def logprob_jacobian(
    params: ParamSet, x: np.ndarray, cap: Optional[int] = DEFAULT_DIM_CAP
) -> LogProbJacobian:
    """
    Row k is the gradient of log p_k with respect to the flattened input.

    Raises:
        InputSizeError: If the input dimension exceeds ``cap``
    """
    rows, log_p = _rows(params, _example(params, x, cap), log_space=True)
    return LogProbJacobian(rows, np.exp(log_p))


def fim(params: ParamSet, x: np.ndarray, cap: Optional[int] = DEFAULT_DIM_CAP) -> np.ndarray:
    """Input-space Fisher information sum_k p_k g_k g_k^T, g_k = grad log p_k."""
    jac = logprob_jacobian(params, x, cap)
    return (jac.rows.T * jac.probs) @ jac.rows


def fim_trace(params: ParamSet, x: np.ndarray) -> float:
    """Tr(G) = sum_k p_k ||grad log p_k||^2 without forming G."""
    jac = logprob_jacobian(params, x, cap=None)
    return float(np.sum(jac.probs * np.sum(jac.rows * jac.rows, axis=1)))


def hessian_ce(
    params: ParamSet, x: np.ndarray, y: int = 0, cap: Optional[int] = DEFAULT_DIM_CAP
) -> np.ndarray:
    """
    Input Hessian of softmax cross-entropy, J^T (diag p - p p^T) J with J the
    logit Jacobian. The label does not enter the result.
    """
    _label(params, y)
    jac, z = logit_jacobian(params, x, cap)
    log_p = ops.log_softmax(Tensor(z[None, :])).data[0]
    p = np.exp(log_p)
    curvature = np.diag(p) - np.outer(p, p)
    return jac.T @ curvature @ jac


def ce_loss(params: ParamSet, x: np.ndarray, y: int) -> float:
    """Cross-entropy of one example."""
    batch = _example(params, x, None)
    log_p = ops.log_softmax(forward(params.spec, params.constants(), Tensor(batch)))
    return float(-log_p.data[0, _label(params, y)])


def ce_input_gradient(params: ParamSet, x: np.ndarray, y: int) -> np.ndarray:
    """Gradient of cross-entropy with respect to the flattened input (one backward pass)."""
    tape = Tape()
    point = tape.leaf(_example(params, x, None), name="x")
    log_p = ops.log_softmax(forward(params.spec, params.constants(), point))
    loss = ops.scale(ops.take(log_p, (0, _label(params, y))), -1.0)
    return tape.backward(loss)[point].reshape(-1)


def _mc_kl(params: ParamSet, x: np.ndarray, sigmas: np.ndarray, stream: NoiseStream) -> float:
    """Mean of KL(p(x) || p(x + sigma_i z_i)) over the given per-draw scales."""
    spec = params.spec
    batch = _example(params, x, None)
    constants = params.constants()
    log_p = ops.log_softmax(forward(spec, constants, Tensor(batch))).data[0]
    p = np.exp(log_p)

    total = 0.0
    for start in range(0, sigmas.size, MC_CHUNK):
        scale = sigmas[start : start + MC_CHUNK]
        z = stream.child(start // MC_CHUNK).normal((scale.size,) + tuple(spec.input_shape))
        noisy = batch + scale.reshape((-1,) + (1,) * len(spec.input_shape)) * z
        log_q = ops.log_softmax(forward(spec, constants, Tensor(noisy))).data
        total += float(np.sum(p * (log_p - log_q)))
    return total / sigmas.size


def kl_gauss_expectation(
    params: ParamSet, x: np.ndarray, sigma: float, n: int, stream: NoiseStream
) -> Tuple[float, float]:
    """
    Monte-Carlo E KL(p(x) || p(x + delta)), delta ~ N(0, sigma^2 I), next to
    its second-order value sigma^2 / 2 * Tr(G).

    Returns:
        (mc_estimate, analytic)
    """
    if sigma < 0 or n < 1:
        raise LandscapeError(f"Need sigma >= 0 and n >= 1, got sigma={sigma}, n={n}")
    mc = _mc_kl(params, x, np.full(n, float(sigma)), stream)
    analytic = sigma * sigma / 2.0 * fim_trace(params, x)
    return mc, analytic


def diverse_noise_coefficient(sigma_max: float) -> float:
    """E[sigma^2 / 2] for sigma ~ U(0, sigma_max)."""
    return sigma_max * sigma_max / 6.0


def kl_diverse_expectation(
    params: ParamSet, x: np.ndarray, sigma_max: float, n: int, stream: NoiseStream
) -> Tuple[float, float]:
    """
    As ``kl_gauss_expectation`` with sigma ~ U(0, sigma_max) drawn per sample;
    the analytic side is sigma_max^2 / 6 * Tr(G).
    """
    if sigma_max < 0 or n < 1:
        raise LandscapeError(f"Need sigma_max >= 0 and n >= 1, got {sigma_max}, {n}")
    sigmas = stream.child(0).uniform(n, 0.0, sigma_max)
    mc = _mc_kl(params, x, sigmas, stream.child(1))
    analytic = diverse_noise_coefficient(sigma_max) * fim_trace(params, x)
    return mc, analytic


@dataclass(frozen=True)
class GradNormIdentity:
    """||grad L|| by backward pass (lhs) and from the Jacobian rows (rhs)."""

    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)


def gradnorm_identity_check(
    params: ParamSet, x: np.ndarray, y_onehot: Sequence[float]
) -> GradNormIdentity:
    """
    Compare ||grad_x L|| with sqrt(sum_k y_k ||grad_x log p_k||^2).

    Raises:
        LandscapeError: If ``y_onehot`` is not a one-hot vector of length K
    """
    y = np.asarray(y_onehot, dtype=np.float64)
    k = params.spec.num_classes
    if y.shape != (k,) or not np.all((y == 0) | (y == 1)) or y.sum() != 1:
        raise LandscapeError(f"Expected a one-hot vector of length {k}, got {y_onehot}")
    label = int(np.argmax(y))
    lhs = float(np.linalg.norm(ce_input_gradient(params, x, label)))
    rows = logprob_jacobian(params, x, cap=None).rows
    rhs = float(np.sqrt(np.sum(y * np.sum(rows * rows, axis=1))))
    return GradNormIdentity(lhs, rhs)


def power_iteration(
    matrix: np.ndarray,
    iters: int = POWER_ITERATIONS,
    tol: float = POWER_TOL,
    stream: Optional[NoiseStream] = None,
) -> float:
    """
    Dominant eigenvalue of a symmetric PSD matrix.

    Starts from a seeded Gaussian vector and stops after ``iters`` steps or
    when the Rayleigh quotient changes by less than ``tol`` relative. If the
    start lands in the null space of a nonzero matrix, the iteration restarts
    from the next child of ``stream``.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise LandscapeError(f"Expected a square matrix, got shape {matrix.shape}")
    d = matrix.shape[0]
    if d == 0 or not np.any(matrix):
        return 0.0
    stream = stream if stream is not None else NoiseStream(POWER_SEED, STREAM_ANALYSIS)
    for attempt in range(POWER_RESTARTS):
        v = stream.child(attempt).normal(d)
        v /= np.linalg.norm(v)
        w = matrix @ v
        if np.linalg.norm(w) > 0.0:
            break
        logger.debug("Power iteration start %d in the null space, restarting", attempt)
    else:
        raise LandscapeError(f"Power iteration found no start outside the null space in {POWER_RESTARTS} tries")

    estimate = float(v @ w)
    for _ in range(iters):
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        w = matrix @ v
        updated = float(v @ w)
        if abs(updated - estimate) <= tol * abs(updated):
            return updated
        estimate = updated
    return estimate


def hutchinson_samples(
    matvec: Callable[[np.ndarray], np.ndarray], dim: int, n_vectors: int, stream: NoiseStream
) -> np.ndarray:
    """z^T M z for ``n_vectors`` Rademacher vectors z."""
    if n_vectors < 1:
        raise LandscapeError(f"n_vectors must be >= 1, got {n_vectors}")
    values = np.empty(n_vectors)
    for i in range(n_vectors):
        z = stream.rademacher(dim)
        values[i] = float(z @ matvec(z))
    return values


def hutchinson_trace(
    matvec: Callable[[np.ndarray], np.ndarray], dim: int, n_vectors: int, stream: NoiseStream
) -> float:
    """Hutchinson estimate of Tr(M) from Rademacher vectors."""
    return float(hutchinson_samples(matvec, dim, n_vectors, stream).mean())


@dataclass(frozen=True)
class BoundTerms:
    """
    Attributes:
        surrogate_lhs: |<grad L, delta> + 1/2 delta^T H delta|
        bound_rhs: ||delta|| ||grad log p_y|| + 1/2 lambda_max(H) ||delta||^2
        fd_lhs: |L(x + delta) - L(x)|
    """

    surrogate_lhs: np.ndarray
    bound_rhs: np.ndarray
    fd_lhs: np.ndarray


class LossChangeBound:
    """
    Precomputed gradient, Hessian and lambda_max at (x, y), evaluated
    against many perturbations.
    """

    def __init__(self, params: ParamSet, x: np.ndarray, y: int, cap: Optional[int] = DEFAULT_DIM_CAP):
        self.params = params
        self.x = _example(params, x, cap)
        self.y = _label(params, y)
        self.gradient = ce_input_gradient(params, x, y)
        self.hessian = hessian_ce(params, x, y, cap)
        self.lambda_max = power_iteration(self.hessian)
        rows = logprob_jacobian(params, x, cap).rows
        self.label_grad_norm = float(np.linalg.norm(rows[self.y]))
        self.loss = ce_loss(params, x, y)

    def quadratic_change(self, deltas: np.ndarray) -> np.ndarray:
        """<g, delta> + 1/2 delta^T H delta for each row of ``deltas``."""
        deltas = np.atleast_2d(deltas)
        return deltas @ self.gradient + 0.5 * np.einsum("ni,ij,nj->n", deltas, self.hessian, deltas)

    def loss_change(self, deltas: np.ndarray) -> np.ndarray:
        """L(x + delta) - L(x) by direct evaluation, batched."""
        spec = self.params.spec
        deltas = np.atleast_2d(deltas)
        points = self.x + deltas.reshape((-1,) + tuple(spec.input_shape))
        log_p = ops.log_softmax(forward(spec, self.params.constants(), Tensor(points))).data
        return -log_p[:, self.y] - self.loss

    def evaluate(self, deltas: np.ndarray) -> BoundTerms:
        deltas = np.atleast_2d(deltas)
        norms = np.linalg.norm(deltas, axis=1)
        return BoundTerms(
            surrogate_lhs=np.abs(self.quadratic_change(deltas)),
            bound_rhs=norms * self.label_grad_norm + 0.5 * self.lambda_max * norms * norms,
            fd_lhs=np.abs(self.loss_change(deltas)),
        )


def loss_change_check(params: ParamSet, x: np.ndarray, y: int, delta: np.ndarray) -> Tuple[float, float, float]:
    """
    Loss-change bound at one perturbation.

    Returns:
        (surrogate_lhs, bound_rhs, fd_lhs)

    Raises:
        LandscapeError: If ``delta`` has zero norm or the wrong size
    """
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if delta.size != params.spec.input_dim:
        raise LandscapeError(f"Perturbation of size {delta.size} for input dimension {params.spec.input_dim}")
    if not np.linalg.norm(delta) > 0:
        raise LandscapeError("Perturbation must have positive norm")
    terms = LossChangeBound(params, x, y).evaluate(delta[None, :])
    return float(terms.surrogate_lhs[0]), float(terms.bound_rhs[0]), float(terms.fd_lhs[0])


def remainder_slope(
    params: ParamSet,
    x: np.ndarray,
    y: int,
    direction: np.ndarray,
    norms: Sequence[float],
) -> float:
    """
    Log-log slope of |L(x + delta) - L(x) - quadratic model| against ||delta||
    along ``direction``; about 3 for a smooth loss.
    """
    direction = np.asarray(direction, dtype=np.float64).reshape(-1)
    direction = direction / np.linalg.norm(direction)
    norms = np.asarray(norms, dtype=np.float64)
    bound = LossChangeBound(params, x, y)
    deltas = norms[:, None] * direction[None, :]
    remainder = np.abs(bound.loss_change(deltas) - bound.quadratic_change(deltas))
    if np.any(remainder <= 0):
        raise LandscapeError("Remainder vanished at some norm; the loss is locally quadratic")
    slope, _ = np.polyfit(np.log(norms), np.log(remainder), 1)
    return float(slope)


CURVATURE_COLUMNS = ["index", "label", "trace_h", "lambda_max", "grad_norm"]


@dataclass(frozen=True)
class CurvatureReport:
    """Per-input curvature statistics and their aggregate summary."""

    per_input: pd.DataFrame

    @property
    def summary(self) -> pd.DataFrame:
        """Mean, std and quartiles of every statistic."""
        stats = self.per_input[["trace_h", "lambda_max", "grad_norm"]]
        return stats.describe(percentiles=[0.25, 0.5, 0.75])

    def means(self) -> Dict[str, float]:
        return {
            column: float(self.per_input[column].mean())
            for column in ("trace_h", "lambda_max", "grad_norm")
        }


def curvature_report(
    params: ParamSet,
    inputs: np.ndarray,
    labels: Sequence[int],
    cap: Optional[int] = DEFAULT_DIM_CAP,
) -> CurvatureReport:
    """Tr(H), lambda_max(H) and ||grad_x L|| for every input."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    if inputs.shape[0] != labels.shape[0] or labels.size == 0:
        raise LandscapeError(f"{inputs.shape[0]} inputs for {labels.size} labels")
    rows = []
    for i, (x, y) in enumerate(zip(inputs, labels)):
        h = hessian_ce(params, x, int(y), cap)
        rows.append(
            {
                "index": i,
                "label": int(y),
                "trace_h": float(np.trace(h)),
                "lambda_max": power_iteration(h),
                "grad_norm": float(np.linalg.norm(ce_input_gradient(params, x, int(y)))),
            }
        )
    logger.debug("Curvature computed for %d inputs", len(rows))
    return CurvatureReport(pd.DataFrame(rows, columns=CURVATURE_COLUMNS))
