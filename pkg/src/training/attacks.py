"""
Attack Inner Loops

Projected gradient ascent inside an l-inf or l2 ball, used by adversarial
training (ascent on cross-entropy) and TRADES (ascent on the KL divergence
between clean and perturbed predictions). Model weights are treated as
constants inside the loop; only the perturbation is differentiated.
"""

import logging
from typing import Callable, List, Mapping, Sequence, Tuple

import numpy as np

from src.autodiff import ops
from src.autodiff.tape import Tape, Tensor
from src.config_loader import AttackConfig
from src.models import ModelSpec
from src.rng import NoiseStream
from src.training.losses import (
    TrainingError,
    Weights,
    cross_entropy,
    kl_div,
    model_log_probs,
)

logger = logging.getLogger(__name__)

# TRADES starts from this scale of Gaussian noise; the KL gradient vanishes at 0
TRADES_START_SCALE = 1e-3


def _per_example_norm(v: np.ndarray) -> np.ndarray:
    flat = v.reshape(v.shape[0], -1)
    return np.sqrt((flat * flat).sum(axis=1)).reshape((v.shape[0],) + (1,) * (v.ndim - 1))


def project(delta: np.ndarray, epsilon: float, norm: str) -> np.ndarray:
    """Project each example's perturbation onto the epsilon-ball."""
    if norm == "inf":
        return np.clip(delta, -epsilon, epsilon)
    if norm == "2":
        radius = _per_example_norm(delta)
        safe = np.where(radius > 0, radius, 1.0)
        return delta * np.minimum(1.0, epsilon / safe)
    raise TrainingError(f"Unsupported attack norm '{norm}'; expected '2' or 'inf'")


def ascent_step(delta: np.ndarray, grad: np.ndarray, alpha: float, norm: str) -> np.ndarray:
    """Steepest-ascent step of length alpha under the attack norm."""
    if norm == "inf":
        return delta + alpha * np.sign(grad)
    if norm == "2":
        g_norm = _per_example_norm(grad)
        safe = np.where(g_norm > 0, g_norm, 1.0)
        return delta + alpha * np.where(g_norm > 0, grad / safe, 0.0)
    raise TrainingError(f"Unsupported attack norm '{norm}'; expected '2' or 'inf'")


def _random_start(shape: Tuple[int, ...], cfg: AttackConfig, stream: NoiseStream) -> np.ndarray:
    if cfg.norm == "inf":
        return stream.uniform(shape, -cfg.epsilon, cfg.epsilon)
    direction = stream.normal(shape)
    direction = direction / np.maximum(_per_example_norm(direction), 1e-300)
    radius = cfg.epsilon * stream.uniform(shape[0]).reshape(
        (shape[0],) + (1,) * (len(shape) - 1)
    )
    return direction * radius


def projected_ascent(
    objective: Callable[[Tensor], Tensor],
    x: np.ndarray,
    start: np.ndarray,
    cfg: AttackConfig,
) -> Tuple[np.ndarray, List[float]]:
    """
    Run cfg.steps projected ascent steps on ``objective(x + delta)``.

    Returns:
        (final delta, objective value at every iterate including the start)
    """
    delta = project(start, cfg.epsilon, cfg.norm)
    trace = []
    for _ in range(cfg.steps):
        tape = Tape()
        point = tape.leaf(x + delta, name="x_adv")
        value = objective(point)
        trace.append(value.item())
        grad = tape.backward(value)[point]
        delta = project(ascent_step(delta, grad, cfg.alpha, cfg.norm), cfg.epsilon, cfg.norm)
    trace.append(objective(Tensor(x + delta)).item())
    return delta, trace


def _frozen(weights: Weights) -> Mapping[str, Tensor]:
    return {name: Tensor(w.data) for name, w in weights.items()}


def pgd(
    spec: ModelSpec,
    weights: Weights,
    x: Tensor,
    y: Sequence[int],
    cfg: AttackConfig,
    stream: NoiseStream,
) -> Tensor:
    """
    Perturbation maximizing cross-entropy within the epsilon-ball.

    delta_0 is 0 unless ``cfg.random_start``; every ascent step is followed
    by projection onto the ball of norm ``cfg.norm``.

    Raises:
        TrainingError: On an unsupported norm
    """
    if cfg.norm not in ("2", "inf"):
        raise TrainingError(f"Unsupported attack norm '{cfg.norm}'; expected '2' or 'inf'")
    x_val = np.asarray(x.data)
    if cfg.epsilon == 0:
        return Tensor(np.zeros_like(x_val))

    constants = _frozen(weights)

    def objective(point: Tensor) -> Tensor:
        return cross_entropy(model_log_probs(spec, constants, point), y)

    start = _random_start(x_val.shape, cfg, stream) if cfg.random_start else np.zeros_like(x_val)
    delta, trace = projected_ascent(objective, x_val, start, cfg)
    logger.debug("PGD cross-entropy trace: %s", trace)
    return Tensor(delta)


def trades_perturbation(
    spec: ModelSpec,
    weights: Weights,
    x: Tensor,
    cfg: AttackConfig,
    stream: NoiseStream,
) -> Tuple[Tensor, List[float]]:
    """
    Perturbation maximizing KL(p(x) || p(x + delta)) within the epsilon-ball.

    Returns:
        (delta, ascent trace of the batch-mean KL objective)
    """
    if cfg.norm not in ("2", "inf"):
        raise TrainingError(f"Unsupported attack norm '{cfg.norm}'; expected '2' or 'inf'")
    x_val = np.asarray(x.data)
    if cfg.epsilon == 0:
        return Tensor(np.zeros_like(x_val)), [0.0]

    constants = _frozen(weights)
    clean = model_log_probs(spec, constants, Tensor(x_val))

    def objective(point: Tensor) -> Tensor:
        return kl_div(clean, model_log_probs(spec, constants, point))

    start = TRADES_START_SCALE * stream.normal(x_val.shape)
    delta, trace = projected_ascent(objective, x_val, start, cfg)
    logger.debug("TRADES KL trace: %s", trace)
    return Tensor(delta), trace


def at_loss(
    spec: ModelSpec,
    weights: Weights,
    x: Tensor,
    y: Sequence[int],
    cfg: AttackConfig,
    stream: NoiseStream,
) -> Tensor:
    """Cross-entropy at the PGD perturbation of x (adversarial training)."""
    delta = pgd(spec, weights, x, y, cfg, stream)
    return cross_entropy(model_log_probs(spec, weights, ops.add(x, delta)), y)


def trades_loss(
    spec: ModelSpec,
    weights: Weights,
    x: Tensor,
    y: Sequence[int],
    lam: float,
    cfg: AttackConfig,
    stream: NoiseStream,
) -> Tensor:
    """CE(x, y) + lam * KL(p(x) || p(x + delta)) at the KL-maximizing delta."""
    delta, _ = trades_perturbation(spec, weights, x, cfg, stream)
    clean = model_log_probs(spec, weights, x)
    loss = cross_entropy(clean, y)
    robust = kl_div(clean, model_log_probs(spec, weights, ops.add(x, delta)))
    return ops.add(loss, ops.scale(robust, lam))
