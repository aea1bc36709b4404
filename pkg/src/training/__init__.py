"""
Training Package.

Losses, attack inner loops, the Nesterov SGD optimizer, and the training
loop for the Standard, DiGN, DiGN_woCR, RSE, AT and TRADES methods.
"""

from src.config_loader import AttackConfig, TrainConfig
from src.training.attacks import at_loss, pgd, trades_loss, trades_perturbation
from src.training.losses import (
    TrainingError,
    cross_entropy,
    dign_loss,
    gn_loss,
    kl_div,
    rse_loss,
    rse_predict,
    rse_probs,
    sample_noise,
)
from src.training.optimizer import SGDState, sgd_update, step_lr
from src.training.trainer import TrainHistory, train

__all__ = [
    "AttackConfig",
    "TrainConfig",
    "TrainingError",
    "TrainHistory",
    "SGDState",
    "at_loss",
    "cross_entropy",
    "dign_loss",
    "gn_loss",
    "kl_div",
    "pgd",
    "rse_loss",
    "rse_predict",
    "rse_probs",
    "sample_noise",
    "sgd_update",
    "step_lr",
    "train",
    "trades_loss",
    "trades_perturbation",
]
