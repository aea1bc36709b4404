"""
SGD with Nesterov momentum and L2 weight decay, plus the step-decay schedule.
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from src.config_loader import TrainConfig
from src.models import ParamSet
from src.training.losses import TrainingError


@dataclass
class SGDState:
    """Velocity buffers keyed by parameter name."""

    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "SGDState":
        return cls({name: np.zeros_like(value) for name, value in params.tensors.items()})


def sgd_update(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    state: SGDState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> Tuple[ParamSet, SGDState]:
    """
    One Nesterov step.

    g <- g + wd * theta
    v <- mu * v - lr * g
    theta <- theta + mu * v - lr * g

    Returns:
        (new ParamSet, new SGDState); inputs are left untouched

    Raises:
        TrainingError: If a gradient or velocity shape does not match its parameter
    """
    new_tensors = {}
    new_velocity = {}
    for name, theta in params.tensors.items():
        if name not in grads:
            raise TrainingError(f"Missing gradient for parameter '{name}'")
        g = np.asarray(grads[name], dtype=np.float64)
        v = state.velocity.get(name, np.zeros_like(theta))
        if g.shape != theta.shape or v.shape != theta.shape:
            raise TrainingError(
                f"Parameter '{name}' has shape {theta.shape}, gradient {g.shape}, "
                f"velocity {v.shape}"
            )
        g = g + weight_decay * theta
        v = momentum * v - lr * g
        new_tensors[name] = theta + momentum * v - lr * g
        new_velocity[name] = v
    return params.replace(new_tensors), SGDState(new_velocity)


def step_lr(epoch: int, config: TrainConfig) -> float:
    """lr_init * decay_factor ** (epoch // decay_every), epochs counted from 0."""
    return config.lr_init * config.lr_decay_factor ** (epoch // config.lr_decay_every)
