"""
Experiment Report Generator
Writes the persistent artifacts of training, evaluation, verification, sweeps
and method comparisons.

Supports CSV, JSON, and Markdown output formats. Nothing written here carries
a timestamp, so reruns of the same configuration reproduce every byte.
"""

import json
import logging
from pathlib import Path
from typing import Any, List, Mapping, Optional, Union

import numpy as np
import pandas as pd

from src.metrics import KIND_PREFIX, EvalReport

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

EVAL_DETAIL_FILE = "eval_detail.csv"
EVAL_SUMMARY_FILE = "eval_summary.csv"
EVAL_JSON_FILE = "eval_report.json"
VERIFY_JSON_FILE = "verify_report.json"
HISTORY_FILE = "history.csv"
TRAIN_AGGREGATE_FILE = "train_aggregate.csv"
SWEEP_FILE = "sweep.csv"
RUN_RECORD_FILE = "run_record.json"
COMPARISON_CSV_FILE = "comparison.csv"
COMPARISON_MD_FILE = "comparison.md"


def convert_types(obj: Any) -> Any:
    """Convert numpy and float specials to plain JSON-safe Python values."""
    if isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if np.isfinite(value) else None
    elif isinstance(obj, np.bool_):
        return bool(obj)
    elif isinstance(obj, np.ndarray):
        return convert_types(obj.tolist())
    elif isinstance(obj, dict):
        return {str(key): convert_types(value) for key, value in obj.items()}
    elif isinstance(obj, (list, tuple)):
        return [convert_types(item) for item in obj]
    return obj


def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    """UTF-8, LF line endings, header row, shortest round-trip floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
    return path


def write_json(data: Any, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(convert_types(data), indent=2) + "\n", encoding="utf-8")
    return path


def _fmt(value: Optional[float], digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return "n/a"
    return f"{value:.{digits}f}"


class ExperimentReportGenerator:
    """
    Writes evaluation, verification, sweep and comparison reports into an
    output directory.
    """

    def __init__(self, output_dir: PathLike):
        """
        Initialize report generator.

        Args:
            output_dir: Root directory that relative report paths resolve against
        """
        self.output_dir = Path(output_dir)

    def write_eval(self, report: EvalReport, directory: Optional[PathLike] = None) -> List[Path]:
        """
        Write the detail CSV, the one-row summary CSV and the JSON report.

        Returns:
            Paths written, in that order
        """
        directory = Path(directory) if directory is not None else self.output_dir
        paths = [
            write_csv(report.detail_frame(), directory / EVAL_DETAIL_FILE),
            write_csv(report.summary_frame(), directory / EVAL_SUMMARY_FILE),
            write_json(report.to_dict(), directory / EVAL_JSON_FILE),
        ]
        logger.info("Wrote evaluation report to %s", directory)
        return paths

    def write_verify(self, results: Mapping[str, Any], directory: Optional[PathLike] = None) -> Path:
        directory = Path(directory) if directory is not None else self.output_dir
        return write_json(dict(results), directory / VERIFY_JSON_FILE)

    def write_train_aggregate(self, method: str, row: Mapping[str, Any]) -> Path:
        return write_csv(pd.DataFrame([dict(row)]), self.output_dir / method / TRAIN_AGGREGATE_FILE)

    def write_sweep(self, frame: pd.DataFrame) -> Path:
        return write_csv(frame, self.output_dir / SWEEP_FILE)

    def write_run_record(self, record: Any) -> Path:
        return write_json(record.to_dict(), self.output_dir / record.method / RUN_RECORD_FILE)

    def write_comparison(self, frame: pd.DataFrame, config_hash: str) -> List[Path]:
        """
        Write the per-method comparison as CSV and as a Markdown table.

        Args:
            frame: One row per method (see src.experiment.comparison_frame)
            config_hash: Hash of the resolved configuration

        Returns:
            [csv path, markdown path]
        """
        csv_path = write_csv(frame, self.output_dir / COMPARISON_CSV_FILE)
        md_path = self.output_dir / COMPARISON_MD_FILE
        md_path.write_text(self._generate_markdown(frame, config_hash), encoding="utf-8")
        logger.info("Wrote comparison of %d methods to %s", len(frame), self.output_dir)
        return [csv_path, md_path]

    def _generate_markdown(self, frame: pd.DataFrame, config_hash: str) -> str:
        """Generate Markdown comparison report."""

        md = f"""# Robustness Comparison

**Config hash:** `{config_hash}`
**Methods:** {len(frame)}

## Accuracy and Calibration

Values are mean ± sample standard deviation across seeds; accuracies and
RMS calibration errors are fractions in [0, 1].

| Method | Seeds | Clean Acc | mCA | mCA-N | RMSE Clean | RMSE-N |
|---|---|---|---|---|---|---|
"""
        for row in frame.to_dict(orient="records"):
            cells = [
                self._mean_std(row, metric)
                for metric in ("clean_acc", "mca", "mca_n", "rmse_clean", "rmse_n")
            ]
            md += f"| {row['method']} | {row['n_seeds']} | " + " | ".join(cells) + " |\n"

        kinds = [
            column[len(KIND_PREFIX) : -len("_mean")]
            for column in frame.columns
            if column.startswith(KIND_PREFIX) and column.endswith("_mean")
        ]
        if kinds:
            md += "\n## Accuracy per Corruption Kind\n\n"
            md += "Accuracy averaged over severities, mean ± sample standard deviation across seeds.\n\n"
            md += "| Method | " + " | ".join(kinds) + " |\n"
            md += "|---|" + "---|" * len(kinds) + "\n"
            for row in frame.to_dict(orient="records"):
                cells = [self._mean_std(row, f"{KIND_PREFIX}{kind}") for kind in kinds]
                md += f"| {row['method']} | " + " | ".join(cells) + " |\n"

        best = self._best_method(frame)
        if best is not None:
            md += f"\n**Highest mCA-N:** {best}\n"
        return md

    @staticmethod
    def _mean_std(row: Mapping[str, Any], metric: str) -> str:
        mean = row.get(f"{metric}_mean")
        std = row.get(f"{metric}_std")
        if mean is None or pd.isna(mean):
            return "n/a"
        if std is None or pd.isna(std):
            return _fmt(mean)
        return f"{_fmt(mean)} ± {_fmt(std)}"

    @staticmethod
    def _best_method(frame: pd.DataFrame) -> Optional[str]:
        scores = pd.to_numeric(frame.get("mca_n_mean"), errors="coerce") if len(frame) else None
        if scores is None or scores.isna().all():
            return None
        return str(frame.loc[scores.idxmax(), "method"])


def load_eval_report(directory: PathLike) -> EvalReport:
    """Read back an EvalReport written by ``write_eval``."""
    path = Path(directory) / EVAL_JSON_FILE
    return EvalReport.from_dict(json.loads(path.read_text(encoding="utf-8")))

