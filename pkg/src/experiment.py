"""
Experiment Orchestration

Resolves datasets and models from an ExperimentConfig, trains and evaluates
one (method, seed) job at a time, fans jobs out over a process pool capped by
DIGN_THREADS, and aggregates per-seed results into RunRecords.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd

from src.config_loader import ConfigurationError, ExperimentConfig, TrainConfig, config_hash
from src.datasets import (
    Dataset,
    SynthSpec,
    generate_synth,
    load_dataset_cache,
    load_idx,
    save_dataset_cache,
    split,
)
from src.metrics import KIND_PREFIX, SUMMARY_COLUMNS, EvalReport, evaluate
from src.models import ModelSpec, ParamSet, build_model_spec
from src.rng import STREAM_ENSEMBLE, NoiseStream
from src.training import TrainHistory, rse_probs, train

logger = logging.getLogger(__name__)

THREADS_ENV = "DIGN_THREADS"
AGGREGATE_METRICS = ["clean_acc", "mca", "mca_n", "rmse_clean", "rmse_n", "rmse_corrupt"]
SWEEP_COLUMNS = ["lambda", "sigma_max", "n_samples", "seed", "clean_acc", "mca_n", "mca"]

R = TypeVar("R")


@dataclass(frozen=True)
class DataBundle:
    """Train, validation and test splits of one experiment."""

    train: Dataset
    val: Dataset
    test: Dataset


def synth_spec(config: ExperimentConfig) -> SynthSpec:
    ds = config.dataset
    return SynthSpec(
        num_classes=ds.classes,
        height=ds.height,
        width=ds.width,
        train_per_class=ds.train_per_class,
        val_per_class=ds.val_per_class,
        test_per_class=ds.test_per_class,
        jitter=ds.jitter,
        seed=ds.seed,
    )


def load_data(config: ExperimentConfig) -> DataBundle:
    """
    Build the dataset splits a config describes.

    Synthetic data is generated from its spec. When ``cache_dir`` is set the
    splits are written there as IDX files on first use and always read back
    from the cache, so the first run and later runs over one cache see the same
    8-bit quantized data.
    IDX data holds out a (stratified) validation fraction of the training file.
    """
    ds = config.dataset
    if ds.kind == "idx":
        full = load_idx(ds.train_images, ds.train_labels, id="idx-train")
        test = load_idx(ds.test_images, ds.test_labels, id="idx-test", num_classes=full.num_classes)
        train_part, val_part = split(full, (1.0 - ds.val_fraction, ds.val_fraction), ds.seed, ds.stratify)
        return DataBundle(train_part, val_part, test)

    spec = synth_spec(config)
    if ds.cache_dir is None:
        return DataBundle(*generate_synth(spec))

    names = [f"{spec.id}-{part}" for part in ("train", "val", "test")]
    cached = [load_dataset_cache(ds.cache_dir, name) for name in names]
    if any(c is None for c in cached):
        for dataset in generate_synth(spec):
            save_dataset_cache(dataset, ds.cache_dir, {"synth_spec": spec.to_dict()})
        cached = [load_dataset_cache(ds.cache_dir, name) for name in names]
    return DataBundle(*cached)


def model_spec_for(config: ExperimentConfig, data: DataBundle) -> ModelSpec:
    return build_model_spec(config.model, data.train.input_shape, data.train.num_classes)


def run_dir(output_dir: str, method: str, seed: int) -> Path:
    return Path(output_dir) / method / f"seed_{seed}"


def train_config_for(config: ExperimentConfig, method: str, seed: int) -> TrainConfig:
    return config.with_train(method=method, seed=seed).train


def probability_fn_for(params: ParamSet, train_config: TrainConfig) -> Optional[Callable[[np.ndarray], np.ndarray]]:
    """RSE models are scored through their test-time ensemble; others use plain softmax."""
    if train_config.method != "RSE":
        return None

    def ensemble(images: np.ndarray) -> np.ndarray:
        stream = NoiseStream(train_config.seed, STREAM_ENSEMBLE)
        return rse_probs(params, images, train_config.rse_sigma, train_config.rse_ensemble_n, stream)

    return ensemble


def evaluate_run(
    config: ExperimentConfig,
    params: ParamSet,
    train_config: TrainConfig,
    test_set: Dataset,
) -> EvalReport:
    """Score one trained model with the configured corruptions."""
    cc = config.corruption
    return evaluate(
        params,
        test_set,
        kinds=cc.kinds,
        seed=train_config.seed,
        severities=cc.severities,
        noise_kinds=cc.noise_kinds,
        n_bins=config.metrics.n_bins,
        tables=cc.tables,
        probability_fn=probability_fn_for(params, train_config),
        metadata={"method": train_config.method, "model": params.spec.name, "seed": train_config.seed},
    )


@dataclass
class SeedResult:
    """Outputs of one (method, seed) job."""

    method: str
    seed: int
    params: ParamSet
    history: TrainHistory
    report: Optional[EvalReport] = None


def train_job(config: ExperimentConfig, method: str, seed: int, evaluate_after: bool) -> SeedResult:
    """Train (and optionally evaluate) one job; top-level so it pickles for the pool."""
    data = load_data(config)
    spec = model_spec_for(config, data)
    train_config = train_config_for(config, method, seed)
    params, history = train(train_config, data.train, data.val, spec)
    report = evaluate_run(config, params, train_config, data.test) if evaluate_after else None
    return SeedResult(method, seed, params, history, report)


def thread_cap() -> int:
    """Job parallelism from DIGN_THREADS; 1 (sequential) when unset."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")
    if value < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")
    return value


def run_jobs(fn: Callable[..., R], jobs: Sequence[Tuple[Any, ...]], threads: Optional[int] = None) -> List[R]:
    """Run ``fn(*job)`` for every job, in job order, across up to ``threads`` processes."""
    threads = thread_cap() if threads is None else threads
    if threads <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def summary_row(report: EvalReport) -> Dict[str, Any]:
    row = report.summary_row()
    row["rmse_corrupt"] = report.corrupt_rmse
    return row


def _seed_stats(values: pd.Series) -> Dict[str, Optional[float]]:
    values = pd.to_numeric(values, errors="coerce").dropna()
    return {
        "mean": float(values.mean()) if len(values) else None,
        "std": float(values.std(ddof=1)) if len(values) > 1 else None,
    }


@dataclass
class RunRecord:
    """
    Per-seed results of one method under one resolved config.

    Attributes:
        config_hash: SHA-256 of the resolved configuration
        method: Training method
        reports: EvalReport per seed
        histories: TrainHistory per seed
    """

    config_hash: str
    method: str
    reports: Dict[int, EvalReport] = field(default_factory=dict)
    histories: Dict[int, TrainHistory] = field(default_factory=dict)

    @property
    def seeds(self) -> List[int]:
        return sorted(self.reports)

    def per_seed_frame(self) -> pd.DataFrame:
        rows = [summary_row(self.reports[s]) for s in self.seeds]
        return pd.DataFrame(rows, columns=SUMMARY_COLUMNS + ["rmse_corrupt"])

    def aggregate(self) -> Dict[str, Dict[str, Optional[float]]]:
        """
        Mean and sample standard deviation of each metric across seeds.

        The standard deviation is None with fewer than two seeds; metrics that
        are None for every seed aggregate to None.
        """
        frame = self.per_seed_frame()
        return {metric: _seed_stats(frame[metric]) for metric in AGGREGATE_METRICS}

    @property
    def kinds(self) -> List[str]:
        """Corruption kinds in first-seen order across seeds."""
        kinds: List[str] = []
        for seed in self.seeds:
            kinds += [k for k in self.reports[seed].kinds if k not in kinds]
        return kinds

    def kind_aggregate(self) -> Dict[str, Dict[str, Optional[float]]]:
        """Per corruption kind: accuracy averaged over severities, then mean and std across seeds."""
        stats = {}
        for kind in self.kinds:
            values = [
                float(np.mean(report.accuracy_matrix[report.kinds.index(kind)]))
                for report in (self.reports[s] for s in self.seeds)
                if kind in report.kinds
            ]
            stats[kind] = _seed_stats(pd.Series(values, dtype=np.float64))
        return stats

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "method": self.method,
            "seeds": self.seeds,
            "reports": {str(s): self.reports[s].to_dict() for s in self.seeds},
            "histories": {
                str(s): {
                    "train_loss": h.train_loss,
                    "train_accuracy": h.train_accuracy,
                    "val_accuracy": h.val_accuracy,
                    "lr": h.lr,
                    "selected_epoch": h.selected_epoch,
                }
                for s, h in sorted(self.histories.items())
            },
            "aggregate": self.aggregate(),
            "kind_aggregate": self.kind_aggregate(),
        }


def train_aggregate_row(config: ExperimentConfig, method: str, results: Sequence[SeedResult]) -> Dict[str, Any]:
    """One row summarizing the selected-epoch accuracies of every seed."""
    selected = [
        (r.history.val_accuracy[r.history.selected_epoch], r.history.train_accuracy[r.history.selected_epoch])
        if r.history.selected_epoch is not None
        else (None, None)
        for r in results
    ]
    val = pd.Series([v for v, _ in selected], dtype="float64").dropna()
    tr = pd.Series([t for _, t in selected], dtype="float64").dropna()
    return {
        "method": method,
        "n_seeds": len(results),
        "seeds": " ".join(str(r.seed) for r in results),
        "val_acc_mean": float(val.mean()) if len(val) else None,
        "val_acc_std": float(val.std(ddof=1)) if len(val) > 1 else None,
        "train_acc_mean": float(tr.mean()) if len(tr) else None,
        "train_acc_std": float(tr.std(ddof=1)) if len(tr) > 1 else None,
        "config_hash": config_hash(config),
    }


def run_method(config: ExperimentConfig, method: str, evaluate_after: bool = True) -> Tuple[List[SeedResult], RunRecord]:
    """Train every configured seed of one method."""
    jobs = [(config, method, seed, evaluate_after) for seed in config.seeds]
    results = run_jobs(train_job, jobs)
    record = RunRecord(config_hash(config), method)
    for result in results:
        record.histories[result.seed] = result.history
        if result.report is not None:
            record.reports[result.seed] = result.report
    return results, record


def sweep_job(config: ExperimentConfig, lam: float, sigma_max: float, n_samples: int, seed: int) -> Dict[str, Any]:
    """Train and evaluate DiGN at one grid point."""
    point = config.with_train(lam=lam, sigma_max=sigma_max, n_samples=n_samples)
    result = train_job(point, "DiGN", seed, evaluate_after=True)
    return {
        "lambda": lam,
        "sigma_max": sigma_max,
        "n_samples": n_samples,
        "seed": seed,
        "clean_acc": result.report.clean_accuracy,
        "mca_n": result.report.mca_n,
        "mca": result.report.mca,
    }


def run_sweep(config: ExperimentConfig) -> pd.DataFrame:
    """
    One row per (grid point, seed), sorted by (lambda, sigma_max, n_samples, seed).

    Raises:
        ConfigurationError: On an empty grid
    """
    grid = config.sweep.grid()
    if not grid:
        raise ConfigurationError("sweep grid must not be empty")
    jobs = [(config, lam, sigma, n, seed) for lam, sigma, n in grid for seed in sorted(config.seeds)]
    rows = run_jobs(sweep_job, jobs)
    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    return frame.sort_values(["lambda", "sigma_max", "n_samples", "seed"], kind="mergesort").reset_index(drop=True)


def comparison_frame(records: Sequence[RunRecord]) -> pd.DataFrame:
    """
    One row per method: mean and std of every aggregated metric, then of the
    per-kind accuracy as ``acc_<kind>_mean`` / ``acc_<kind>_std``.
    """
    kinds: List[str] = []
    for record in records:
        kinds += [k for k in record.kinds if k not in kinds]
    rows = []
    for record in records:
        row: Dict[str, Any] = {"method": record.method, "n_seeds": len(record.seeds)}
        for metric, stats in record.aggregate().items():
            row[f"{metric}_mean"] = stats["mean"]
            row[f"{metric}_std"] = stats["std"]
        for kind, stats in record.kind_aggregate().items():
            row[f"{KIND_PREFIX}{kind}_mean"] = stats["mean"]
            row[f"{KIND_PREFIX}{kind}_std"] = stats["std"]
        rows.append(row)
    metrics = AGGREGATE_METRICS + [f"{KIND_PREFIX}{k}" for k in kinds]
    columns = ["method", "n_seeds"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")]
    return pd.DataFrame(rows, columns=columns)
