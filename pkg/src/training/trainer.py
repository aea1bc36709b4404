"""
Training Loop

Seeded mini-batch SGD for every supported method with step-decay learning
rate and model selection on clean validation accuracy.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.autodiff.tape import Tape, Tensor
from src.config_loader import ConfigurationError, TrainConfig
from src.datasets import Dataset
from src.models import ModelSpec, ParamSet, init_params, predict
from src.rng import STREAM_ATTACK, STREAM_ENSEMBLE, STREAM_NOISE, STREAM_SHUFFLE, NoiseStream
from src.training.attacks import at_loss, trades_loss
from src.training.losses import (
    TrainingError,
    Weights,
    cross_entropy,
    dign_loss,
    gn_loss,
    model_log_probs,
    rse_loss,
    rse_predict,
)
from src.training.optimizer import SGDState, sgd_update, step_lr

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "train_accuracy", "val_accuracy", "lr"]


@dataclass
class TrainHistory:
    """
    Per-epoch record of one training run.

    Attributes:
        train_loss: Example-weighted mean batch objective per epoch
        train_accuracy: Clean accuracy on the training set after each epoch
        val_accuracy: Clean validation accuracy after each epoch
        lr: Learning rate used in each epoch
        selected_epoch: First epoch with the highest validation accuracy, or
            None when no epoch ran
    """

    train_loss: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    selected_epoch: Optional[int] = None

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "epoch": list(range(len(self))),
                "train_loss": self.train_loss,
                "train_accuracy": self.train_accuracy,
                "val_accuracy": self.val_accuracy,
                "lr": self.lr,
            },
            columns=HISTORY_COLUMNS,
        )

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "TrainHistory":
        history = cls(
            train_loss=[float(v) for v in frame["train_loss"]],
            train_accuracy=[float(v) for v in frame["train_accuracy"]],
            val_accuracy=[float(v) for v in frame["val_accuracy"]],
            lr=[float(v) for v in frame["lr"]],
        )
        history.selected_epoch = select_epoch(history.val_accuracy)
        return history


def select_epoch(val_accuracy: List[float]) -> Optional[int]:
    """Index of the first maximizer, or None for an empty history."""
    if not val_accuracy:
        return None
    return int(np.argmax(np.asarray(val_accuracy)))


def batch_loss(
    config: TrainConfig,
    spec: ModelSpec,
    weights: Weights,
    x: Tensor,
    y: np.ndarray,
    epoch: int,
    batch: int,
) -> Tensor:
    """The method's objective on one mini-batch."""
    method = config.method
    if method == "Standard":
        return cross_entropy(model_log_probs(spec, weights, x), y)
    if method == "DiGN":
        stream = NoiseStream(config.seed, STREAM_NOISE, epoch, batch)
        return dign_loss(spec, weights, x, y, config.lam, config.sigma_max, config.n_samples, stream)
    if method == "DiGN_woCR":
        stream = NoiseStream(config.seed, STREAM_NOISE, epoch, batch)
        return gn_loss(spec, weights, x, y, config.sigma_max, config.n_samples, stream)
    if method == "RSE":
        stream = NoiseStream(config.seed, STREAM_NOISE, epoch, batch)
        return rse_loss(spec, weights, x, y, config.rse_sigma, stream)
    if method == "AT":
        stream = NoiseStream(config.seed, STREAM_ATTACK, epoch, batch)
        return at_loss(spec, weights, x, y, config.attack, stream)
    if method == "TRADES":
        stream = NoiseStream(config.seed, STREAM_ATTACK, epoch, batch)
        return trades_loss(spec, weights, x, y, config.lam, config.attack, stream)
    raise TrainingError(f"Unknown training method '{method}'")


def predict_for(params: ParamSet, config: TrainConfig, images: np.ndarray) -> np.ndarray:
    """
    Labels as the method is scored: RSE through its test-time ensemble on
    the fixed ensemble stream, every other method by plain argmax.
    """
    if config.method == "RSE":
        stream = NoiseStream(config.seed, STREAM_ENSEMBLE)
        return rse_predict(params, images, config.rse_sigma, config.rse_ensemble_n, stream)
    return predict(params, images)


def _accuracy(params: ParamSet, config: TrainConfig, dataset: Dataset) -> float:
    return float(np.mean(predict_for(params, config, dataset.images) == dataset.labels))


def _check_inputs(spec: ModelSpec, train_set: Dataset, val_set: Dataset) -> None:
    for name, dataset in (("training", train_set), ("validation", val_set)):
        if len(dataset) == 0:
            raise TrainingError(f"The {name} set is empty")
        if tuple(dataset.input_shape) != tuple(spec.input_shape):
            raise TrainingError(
                f"The {name} set has input shape {dataset.input_shape}, "
                f"model expects {tuple(spec.input_shape)}"
            )
        if dataset.num_classes != spec.num_classes:
            raise TrainingError(
                f"The {name} set has {dataset.num_classes} classes, "
                f"model expects {spec.num_classes}"
            )


def train(
    config: TrainConfig,
    train_set: Dataset,
    val_set: Dataset,
    model_spec: ModelSpec,
    initial: Optional[ParamSet] = None,
) -> Tuple[ParamSet, TrainHistory]:
    """
    Train one model.

    Each epoch visits a seeded permutation of the training set in batches of
    ``config.batch_size`` (the last batch may be smaller). Returned
    parameters are those after the first epoch with the highest clean
    validation accuracy; with zero epochs they equal the initialization.

    Args:
        config: Training configuration (method, schedule, seed, ...)
        train_set: Training data
        val_set: Held-out data for model selection
        model_spec: Architecture
        initial: Starting parameters; defaults to init_params(spec, seed)

    Returns:
        (selected ParamSet, TrainHistory)

    Raises:
        TrainingError: On empty or mismatched data, or a non-finite loss
    """
    try:
        config.validate()
    except ConfigurationError as e:
        raise TrainingError(f"Invalid training configuration: {e}")
    model_spec.validate()
    _check_inputs(model_spec, train_set, val_set)

    params = initial if initial is not None else init_params(model_spec, config.seed)
    state = SGDState.zeros_like(params)
    history = TrainHistory()
    best = params
    best_accuracy = -math.inf

    n = len(train_set)
    logger.info(
        "Training %s (%s) for %d epochs on %d examples, seed %d",
        model_spec.name,
        config.method,
        config.epochs,
        n,
        config.seed,
    )

    for epoch in range(config.epochs):
        lr = step_lr(epoch, config)
        order = NoiseStream(config.seed, STREAM_SHUFFLE, epoch).permutation(n)
        loss_sum = 0.0

        for batch, start in enumerate(range(0, n, config.batch_size)):
            index = order[start : start + config.batch_size]
            tape = Tape()
            weights = params.watch(tape)
            x = Tensor(train_set.images[index])
            y = train_set.labels[index]

            loss = batch_loss(config, model_spec, weights, x, y, epoch, batch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"Non-finite loss {value} at epoch {epoch}, batch {batch}")

            grads = tape.backward(loss)
            params, state = sgd_update(
                params,
                {name: grads[leaf] for name, leaf in weights.items()},
                state,
                lr,
                config.momentum,
                config.weight_decay,
            )
            loss_sum += value * len(index)
            logger.debug("epoch %d batch %d loss %.6f", epoch, batch, value)

        val_accuracy = _accuracy(params, config, val_set)
        history.train_loss.append(loss_sum / n)
        history.train_accuracy.append(_accuracy(params, config, train_set))
        history.val_accuracy.append(val_accuracy)
        history.lr.append(lr)
        if val_accuracy > best_accuracy:
            best, best_accuracy = params, val_accuracy

        logger.info(
            "epoch %d/%d loss %.4f train_acc %.4f val_acc %.4f lr %.4g",
            epoch + 1,
            config.epochs,
            history.train_loss[-1],
            history.train_accuracy[-1],
            val_accuracy,
            lr,
        )

    history.selected_epoch = select_epoch(history.val_accuracy)
    if history.selected_epoch is not None:
        logger.info(
            "Selected epoch %d (val_acc %.4f)", history.selected_epoch, best_accuracy
        )
    return best, history
