"""
Robustness and Calibration Metrics

Accuracy, the corruption accuracy matrix and its means (mCA over every
cell, mCA-N over the noise kinds), and RMS calibration error with
equal-width confidence bins.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from src.corruptions import (
    CORRUPTION_KINDS,
    NOISE_KINDS,
    CorruptionSpec,
    apply_corruption,
)
from src.datasets import Dataset
from src.models import ParamSet, probs
from src.rng import STREAM_CORRUPTION, NoiseStream

logger = logging.getLogger(__name__)

DEFAULT_BINS = 15
CONFIDENCE_TOL = 1e-12
DETAIL_COLUMNS = ["corruption", "severity", "accuracy", "n_samples"]
SUMMARY_COLUMNS = ["clean_acc", "mca", "mca_n", "rmse_clean", "rmse_n", "seed"]
# Column prefix for per-kind accuracy aggregates in comparison tables
KIND_PREFIX = "acc_"

ProbabilityFn = Callable[[np.ndarray], np.ndarray]


class MetricsError(Exception):
    """Raised on empty or malformed metric inputs."""

    pass


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of predictions equal to their labels."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise MetricsError(
            f"{predictions.shape[0]} predictions for {labels.shape[0]} labels"
        )
    if predictions.size == 0:
        raise MetricsError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == labels))


def mca(matrix: np.ndarray) -> float:
    """Mean corruption accuracy: arithmetic mean of every matrix entry."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.size == 0:
        raise MetricsError(f"mCA needs a non-empty M x J matrix, got shape {matrix.shape}")
    return float(matrix.mean())


def mca_noise(
    matrix: np.ndarray,
    kinds: Sequence[str],
    include: Sequence[str] = NOISE_KINDS,
) -> float:
    """
    mCA restricted to the rows whose kind is in ``include``.

    Args:
        matrix: M x J accuracy matrix
        kinds: Corruption kind of each row
        include: Kinds pooled; defaults to every noise kind except gaussian

    Raises:
        MetricsError: On an unknown kind or an empty restriction
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    for kind in list(kinds) + list(include):
        if kind not in CORRUPTION_KINDS:
            raise MetricsError(f"Unknown corruption kind '{kind}'")
    if matrix.ndim != 2 or matrix.shape[0] != len(kinds):
        raise MetricsError(f"{len(kinds)} kinds for a matrix of shape {matrix.shape}")
    rows = [i for i, kind in enumerate(kinds) if kind in include]
    if not rows:
        raise MetricsError(f"None of {list(kinds)} is in {list(include)}")
    return mca(matrix[rows])


@dataclass(frozen=True)
class CalibrationInput:
    """
    Attributes:
        confidences: Max predicted probability per sample
        correct: Whether each prediction was right
        n_bins: Number of equal-width bins over [0, 1]
        num_classes: K when known; the max of K probabilities is at least 1/K
    """

    confidences: np.ndarray
    correct: np.ndarray
    n_bins: int = DEFAULT_BINS
    num_classes: Optional[int] = None

    def validate(self) -> None:
        confidences = np.asarray(self.confidences, dtype=np.float64)
        correct = np.asarray(self.correct)
        if confidences.ndim != 1 or confidences.size == 0:
            raise MetricsError("Calibration needs at least one confidence")
        if correct.shape != confidences.shape:
            raise MetricsError(
                f"{confidences.size} confidences for {correct.size} correctness flags"
            )
        if confidences.min() < 0.0 or confidences.max() > 1.0:
            raise MetricsError("Confidences must lie in [0, 1]")
        if self.num_classes is not None:
            if self.num_classes < 1:
                raise MetricsError(f"num_classes must be >= 1, got {self.num_classes}")
            floor = 1.0 / self.num_classes
            if confidences.min() < floor - CONFIDENCE_TOL:
                raise MetricsError(
                    f"Confidence {confidences.min():.6g} is below 1/K = {floor:.6g} for K = {self.num_classes}"
                )
        if self.n_bins < 1:
            raise MetricsError(f"n_bins must be >= 1, got {self.n_bins}")

    @classmethod
    def from_probabilities(
        cls, probabilities: np.ndarray, labels: Sequence[int], n_bins: int = DEFAULT_BINS
    ) -> "CalibrationInput":
        probabilities = np.asarray(probabilities, dtype=np.float64)
        predictions = np.argmax(probabilities, axis=1)
        return cls(
            confidences=np.clip(probabilities.max(axis=1), 0.0, 1.0),
            correct=predictions == np.asarray(labels),
            n_bins=n_bins,
            num_classes=probabilities.shape[1],
        )


def rms_calibration_error(inputs: CalibrationInput) -> float:
    """
    sqrt(sum_i |B_i| / n * (acc(B_i) - conf(B_i))^2).

    Sample j lands in bin floor(c_j * n_B); c_j = 1 goes to the last bin.
    Empty bins contribute nothing.
    """
    inputs.validate()
    confidences = np.asarray(inputs.confidences, dtype=np.float64)
    correct = np.asarray(inputs.correct, dtype=np.float64)
    n_bins = inputs.n_bins

    bins = np.minimum(np.floor(confidences * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    conf_sums = np.bincount(bins, weights=confidences, minlength=n_bins)
    hit_sums = np.bincount(bins, weights=correct, minlength=n_bins)

    filled = counts > 0
    gaps = (hit_sums[filled] - conf_sums[filled]) / counts[filled]
    weights = counts[filled] / confidences.size
    return float(np.sqrt(np.sum(weights * gaps * gaps)))


@dataclass
class EvalReport:
    """
    Clean and corrupted scores of one model on one test set.

    Attributes:
        clean_accuracy: Accuracy on the uncorrupted test set
        accuracy_matrix: M x J, rows follow ``kinds``, columns ``severities``
        kinds: Corruption kinds evaluated
        severities: Severity levels evaluated
        mca: Mean of every matrix entry, None when no corruption was requested
        mca_n: Mean over the noise rows, None when none were evaluated
        clean_rmse: Calibration error on the clean set
        corrupt_rmse: Calibration error pooled over every corrupted cell
        corrupt_rmse_n: Calibration error pooled over the noise rows
        n_samples: Test-set size
        metadata: Model id, seed, dataset id and anything else worth keeping
    """

    clean_accuracy: float
    accuracy_matrix: np.ndarray
    kinds: List[str]
    severities: List[int]
    mca: Optional[float]
    mca_n: Optional[float]
    clean_rmse: float
    corrupt_rmse: Optional[float]
    corrupt_rmse_n: Optional[float]
    n_samples: int
    noise_kinds: List[str] = field(default_factory=lambda: list(NOISE_KINDS))
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def seed(self) -> Optional[int]:
        return self.metadata.get("seed")

    def detail_frame(self) -> pd.DataFrame:
        """One row per (kind, severity) cell."""
        rows = [
            {
                "corruption": kind,
                "severity": severity,
                "accuracy": float(self.accuracy_matrix[i, j]),
                "n_samples": self.n_samples,
            }
            for i, kind in enumerate(self.kinds)
            for j, severity in enumerate(self.severities)
        ]
        return pd.DataFrame(rows, columns=DETAIL_COLUMNS)

    def summary_row(self) -> Dict[str, Any]:
        return {
            "clean_acc": self.clean_accuracy,
            "mca": self.mca,
            "mca_n": self.mca_n,
            "rmse_clean": self.clean_rmse,
            "rmse_n": self.corrupt_rmse_n,
            "seed": self.seed,
        }

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame([self.summary_row()], columns=SUMMARY_COLUMNS)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "clean_accuracy": self.clean_accuracy,
            "accuracy_matrix": self.accuracy_matrix.tolist(),
            "kinds": list(self.kinds),
            "severities": list(self.severities),
            "noise_kinds": list(self.noise_kinds),
            "mca": self.mca,
            "mca_n": self.mca_n,
            "clean_rmse": self.clean_rmse,
            "corrupt_rmse": self.corrupt_rmse,
            "corrupt_rmse_n": self.corrupt_rmse_n,
            "n_samples": self.n_samples,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvalReport":
        matrix = np.asarray(data["accuracy_matrix"], dtype=np.float64)
        return cls(
            clean_accuracy=data["clean_accuracy"],
            accuracy_matrix=matrix.reshape(len(data["kinds"]), len(data["severities"])),
            kinds=list(data["kinds"]),
            severities=list(data["severities"]),
            mca=data["mca"],
            mca_n=data["mca_n"],
            clean_rmse=data["clean_rmse"],
            corrupt_rmse=data["corrupt_rmse"],
            corrupt_rmse_n=data["corrupt_rmse_n"],
            n_samples=data["n_samples"],
            noise_kinds=list(data.get("noise_kinds", NOISE_KINDS)),
            metadata=dict(data.get("metadata", {})),
        )


def evaluate(
    params: ParamSet,
    test_set: Dataset,
    kinds: Sequence[str] = CORRUPTION_KINDS,
    seed: int = 0,
    severities: Sequence[int] = (1, 2, 3, 4, 5),
    noise_kinds: Sequence[str] = NOISE_KINDS,
    n_bins: int = DEFAULT_BINS,
    tables: Optional[Mapping[str, Sequence[float]]] = None,
    probability_fn: Optional[ProbabilityFn] = None,
    metadata: Optional[Mapping[str, Any]] = None,
) -> EvalReport:
    """
    Score a model on clean and corrupted copies of a test set.

    Cell (kind, severity) corrupts the test set with the stream
    (seed, corruption, kind index, severity), where the kind index is its
    position in the full corruption table, so restricting ``kinds`` never
    changes the draws of the remaining cells.

    Args:
        params: Model parameters
        test_set: Test data
        kinds: Corruption kinds; empty for clean metrics only
        seed: Root seed of the corruption streams
        severities: Severity levels per kind
        noise_kinds: Kinds pooled into mCA-N and RMSE-N
        n_bins: Calibration bins
        tables: Severity table overrides
        probability_fn: Maps images to class probabilities; defaults to the
            model's softmax (RSE evaluation passes its ensemble here)
        metadata: Carried into the report

    Raises:
        MetricsError: On an empty test set or unknown kind
    """
    if len(test_set) == 0:
        raise MetricsError("Cannot evaluate on an empty test set")
    for kind in list(kinds) + list(noise_kinds):
        if kind not in CORRUPTION_KINDS:
            raise MetricsError(f"Unknown corruption kind '{kind}'")

    if probability_fn is None:
        def probability_fn(images: np.ndarray) -> np.ndarray:
            return probs(params, images).data

    labels = test_set.labels
    clean_p = probability_fn(test_set.images)
    clean_accuracy = accuracy(np.argmax(clean_p, axis=1), labels)
    clean_rmse = rms_calibration_error(CalibrationInput.from_probabilities(clean_p, labels, n_bins))

    matrix = np.zeros((len(kinds), len(severities) if len(kinds) else 0))
    pooled: List[np.ndarray] = []
    pooled_noise: List[np.ndarray] = []
    for i, kind in enumerate(kinds):
        for j, severity in enumerate(severities):
            spec = CorruptionSpec(kind, int(severity))
            stream = NoiseStream(seed, STREAM_CORRUPTION, CORRUPTION_KINDS.index(kind), int(severity))
            corrupted = apply_corruption(test_set.images, spec, stream, tables)
            p = probability_fn(corrupted)
            matrix[i, j] = accuracy(np.argmax(p, axis=1), labels)
            pooled.append(p)
            if kind in noise_kinds:
                pooled_noise.append(p)
            logger.info("%s: accuracy %.4f", spec, matrix[i, j])

    def pooled_rmse(chunks: List[np.ndarray]) -> Optional[float]:
        if not chunks:
            return None
        stacked = np.concatenate(chunks)
        repeated = np.tile(labels, len(chunks))
        return rms_calibration_error(CalibrationInput.from_probabilities(stacked, repeated, n_bins))

    has_cells = matrix.size > 0
    has_noise = has_cells and any(kind in noise_kinds for kind in kinds)
    return EvalReport(
        clean_accuracy=clean_accuracy,
        accuracy_matrix=matrix,
        kinds=list(kinds),
        severities=[int(s) for s in severities] if has_cells else [],
        mca=mca(matrix) if has_cells else None,
        mca_n=mca_noise(matrix, list(kinds), noise_kinds) if has_noise else None,
        clean_rmse=clean_rmse,
        corrupt_rmse=pooled_rmse(pooled),
        corrupt_rmse_n=pooled_rmse(pooled_noise),
        n_samples=len(test_set),
        noise_kinds=list(noise_kinds),
        metadata={"dataset": test_set.id, "seed": seed, **dict(metadata or {})},
    )
