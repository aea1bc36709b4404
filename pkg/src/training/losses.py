"""
Training Losses

Cross-entropy, KL divergence in log space, and the per-method batch
objectives: diverse Gaussian noise with consistency regularization (DiGN),
the same noise without the consistency term, random self-ensemble input
noise. The attack-based objectives live in src.training.attacks.

Every noisy objective draws sample k from ``stream.child(k)``, so changing
the number of samples never shifts the draws of the others.
"""

from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

from src.autodiff import ops
from src.autodiff.tape import Tensor
from src.models import ModelSpec, ParamSet, forward, predict
from src.rng import NoiseStream

Weights = Mapping[str, Tensor]


class TrainingError(Exception):
    """Raised on invalid training inputs or configuration."""

    pass


def model_log_probs(spec: ModelSpec, weights: Weights, x: Tensor) -> Tensor:
    return ops.log_softmax(forward(spec, weights, x))


def check_labels(labels: Sequence[int], num_classes: int) -> np.ndarray:
    """
    Raises:
        TrainingError: Naming the first out-of-range label and its index
    """
    labels = np.asarray(labels)
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        i = int(bad[0])
        raise TrainingError(
            f"Label {int(labels[i])} at index {i} outside [0, {num_classes})"
        )
    return labels.astype(np.int64)


def cross_entropy(log_probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log_probs[i, y_i]."""
    index = check_labels(labels, log_probs.shape[1])
    return ops.scale(ops.mean_all(ops.pick(log_probs, index)), -1.0)


def kl_div(log_p: Tensor, log_q: Tensor) -> Tensor:
    """Batch mean of sum_c p_c (log p_c - log q_c), computed in log space."""
    terms = ops.mul(ops.exp(log_p), ops.sub(log_p, log_q))
    return ops.scale(ops.sum_all(terms), 1.0 / log_p.shape[0])


def running_mean(mean: Optional[Tensor], term: Tensor, k: int) -> Tensor:
    """
    Mean of the first k + 1 terms given the mean of the first k.

    Identical terms average back to exactly that term.
    """
    if mean is None:
        return term
    return ops.add(mean, ops.scale(ops.sub(term, mean), 1.0 / (k + 1)))


def sample_noise(
    batch_shape: Tuple[int, ...], sigma_max: float, stream: NoiseStream
) -> Tuple[np.ndarray, Tensor]:
    """
    Per-example noise scales sigma_i ~ U(0, sigma_max) and
    delta_i ~ N(0, sigma_i^2 I).

    Returns:
        (sigmas of shape (B,), constant delta of ``batch_shape``)
    """
    batch = batch_shape[0]
    sigmas = stream.uniform(batch, 0.0, sigma_max)
    z = stream.normal(batch_shape)
    delta = sigmas.reshape((batch,) + (1,) * (len(batch_shape) - 1)) * z
    return sigmas, Tensor(delta)


def dign_loss(
    spec: ModelSpec,
    weights: Weights,
    x: Tensor,
    y: Sequence[int],
    lam: float,
    sigma_max: float,
    n: int,
    stream: NoiseStream,
) -> Tensor:
    """
    CE(x, y) + lam * (1/n) sum_k KL(p(x) || p(x + delta_k)).

    Gradients flow through both KL arguments.
    """
    if n < 1:
        raise TrainingError(f"n_samples must be >= 1, got {n}")
    clean = model_log_probs(spec, weights, x)
    loss = cross_entropy(clean, y)

    regularizer = None
    for k in range(n):
        _, delta = sample_noise(x.shape, sigma_max, stream.child(k))
        noisy = model_log_probs(spec, weights, ops.add(x, delta))
        regularizer = running_mean(regularizer, kl_div(clean, noisy), k)
    return ops.add(loss, ops.scale(regularizer, lam))


def gn_loss(
    spec: ModelSpec,
    weights: Weights,
    x: Tensor,
    y: Sequence[int],
    sigma_max: float,
    n: int,
    stream: NoiseStream,
) -> Tensor:
    """(1/n) sum_k CE(x + delta_k, y) with diverse per-example noise scales."""
    if n < 1:
        raise TrainingError(f"n_samples must be >= 1, got {n}")
    mean = None
    for k in range(n):
        _, delta = sample_noise(x.shape, sigma_max, stream.child(k))
        term = cross_entropy(model_log_probs(spec, weights, ops.add(x, delta)), y)
        mean = running_mean(mean, term, k)
    return mean


def rse_loss(
    spec: ModelSpec,
    weights: Weights,
    x: Tensor,
    y: Sequence[int],
    sigma: float,
    stream: NoiseStream,
) -> Tensor:
    """Cross-entropy at x + delta, delta ~ N(0, sigma^2 I) on the input only."""
    delta = Tensor(sigma * stream.normal(x.shape))
    return cross_entropy(model_log_probs(spec, weights, ops.add(x, delta)), y)


def rse_probs(
    params: ParamSet,
    x: np.ndarray,
    sigma: float,
    n: int,
    stream: NoiseStream,
) -> np.ndarray:
    """Softmax probabilities averaged over n noisy copies of x; copy k uses stream.child(k)."""
    if n < 1:
        raise TrainingError(f"rse_ensemble_n must be >= 1, got {n}")
    x = np.asarray(x, dtype=np.float64)
    constants = params.constants()
    total = None
    for k in range(n):
        noisy = x + sigma * stream.child(k).normal(x.shape)
        p = np.exp(model_log_probs(params.spec, constants, Tensor(noisy)).data)
        total = p if total is None else total + p
    return total / n


def rse_predict(
    params: ParamSet,
    x: np.ndarray,
    sigma: float,
    n: int,
    stream: NoiseStream,
) -> np.ndarray:
    """
    Ensemble prediction: argmax of the averaged probabilities (ties to the
    lowest index). With sigma = 0 this is the plain prediction.
    """
    if n < 1:
        raise TrainingError(f"rse_ensemble_n must be >= 1, got {n}")
    if sigma == 0:
        return predict(params, x)
    return np.argmax(rse_probs(params, x, sigma, n, stream), axis=1)