"""
Command-line interface for the DiGN robustness experiments.
Trains, evaluates, verifies, sweeps and compares models from presets or
custom configuration files.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from src.autodiff import AutodiffError
from src.config_loader import (
    DEFAULT_CONFIG_PATH,
    ConfigurationError,
    ExperimentConfig,
    config_hash,
    list_presets,
    load_config,
)
from src.corruptions import CorruptionError
from src.datasets import DatasetError, IdxParseError
from src.experiment import (
    comparison_frame,
    evaluate_run,
    load_data,
    model_spec_for,
    run_dir,
    run_method,
    run_sweep,
    train_aggregate_row,
    train_config_for,
    train_job,
)
from src.landscape import LandscapeError, curvature_report
from src.metrics import EvalReport, MetricsError
from src.models import ModelFormatError, ModelSpecError, load_model, save_model
from src.report import ExperimentReportGenerator
from src.report.experiment_report import HISTORY_FILE, write_csv
from src.theory_validator import TheoryValidator
from src.training import TrainingError

logger = logging.getLogger(__name__)

MODEL_FILE = "model.txt"
CURVATURE_FILE = "curvature.csv"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CHECK_FAILED = 2
EXIT_IO = 3

VALIDATION_ERRORS = (
    ConfigurationError,
    TrainingError,
    ModelSpecError,
    MetricsError,
    CorruptionError,
    LandscapeError,
    DatasetError,
    AutodiffError,
)
IO_ERRORS = (OSError, ModelFormatError, IdxParseError)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    """Install a single RichHandler on the root logger."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    root.addHandler(RichHandler(show_path=False, rich_tracebacks=verbose))
    root.setLevel(level)


class ExperimentCLI:
    """CLI for training, evaluating and verifying robustness experiments"""

    def __init__(self, console: Optional[Console] = None):
        self.parser = self._build_parser()
        self.console = console or Console()

    def _build_parser(self) -> argparse.ArgumentParser:
        """Build the argument parser with all commands"""
        logging_args = argparse.ArgumentParser(add_help=False)
        logging_args.add_argument("--verbose", action="store_true", help="Debug logging")
        logging_args.add_argument("--quiet", action="store_true", help="Warnings and errors only")

        common = argparse.ArgumentParser(add_help=False, parents=[logging_args])
        common.add_argument("--config", help="YAML or JSON configuration file (default: config/experiment.yaml without --preset)")
        common.add_argument("--preset", help="Preset under config/presets (e.g. paper-defaults)")
        common.add_argument("--out", help="Output directory (overrides output_dir)")
        common.add_argument("--seed", type=int, help="Run this single seed instead of the configured list")

        parser = argparse.ArgumentParser(
            prog="dign",
            description="DiGN robustness experiments - diverse Gaussian noise consistency training",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  # Train every configured method and seed with the quick preset
  %(prog)s train --preset desk-quick --out runs/quick

  # Evaluate one saved model under the configured corruptions
  %(prog)s eval --preset desk-quick --model runs/quick/DiGN/seed_0/model.txt

  # Check the curvature identities on a trained model
  %(prog)s verify --preset desk-quick --model runs/quick/DiGN/seed_0/model.txt

  # Compare methods across seeds
  %(prog)s report --preset paper-defaults --out runs/paper

  # List available presets
  %(prog)s list-presets
            """,
        )
        subparsers = parser.add_subparsers(dest="command", help="Available commands")

        train_parser = subparsers.add_parser("train", parents=[common], help="Train every configured method and seed")
        train_parser.add_argument("--method", help="Train only this method")

        eval_parser = subparsers.add_parser("eval", parents=[common], help="Evaluate models under corruptions")
        eval_parser.add_argument("--model", help="Model file; defaults to every trained run under --out")

        verify_parser = subparsers.add_parser("verify", parents=[common], help="Run the curvature theory checks")
        verify_parser.add_argument("--model", help="Model file; defaults to training the first method and seed")

        subparsers.add_parser("sweep", parents=[common], help="DiGN sensitivity sweep over lambda, sigma_max, n")
        subparsers.add_parser("report", parents=[common], help="Train, evaluate and compare every method")

        subparsers.add_parser("list-presets", parents=[logging_args], help="List available configuration presets")

        return parser

    def load_config(self, args: argparse.Namespace) -> ExperimentConfig:
        """
        Resolve defaults, preset, config file and flag overrides.

        With neither --config nor --preset, config/experiment.yaml is the file layer.
        """
        overrides: Dict[str, Any] = {}
        if args.out:
            overrides["output_dir"] = args.out
        if args.seed is not None:
            overrides["seeds"] = [args.seed]
        path = args.config or (None if args.preset else DEFAULT_CONFIG_PATH)
        loader = load_config(path, args.preset, overrides)
        logger.debug("Resolved %r", loader)
        return loader.config

    def cmd_train(self, args) -> int:
        """Execute train command"""
        config = self.load_config(args)
        methods = [args.method] if args.method else list(config.methods)
        if args.method:
            config.with_train(method=args.method).validate()
        reporter = ExperimentReportGenerator(config.output_dir)
        digest = config_hash(config)

        rows = []
        for method in methods:
            results, _ = run_method(config, method, evaluate_after=False)
            for result in results:
                directory = run_dir(config.output_dir, method, result.seed)
                save_model(
                    directory / MODEL_FILE,
                    result.params,
                    {"method": method, "seed": result.seed, "config_hash": digest},
                )
                result.history.to_csv(directory / HISTORY_FILE)
            row = train_aggregate_row(config, method, results)
            reporter.write_train_aggregate(method, row)
            rows.append(row)

        columns = ("method", "n_seeds", "val_acc_mean", "val_acc_std", "train_acc_mean")
        table = Table(title="Training")
        for column in columns:
            table.add_column(column)
        for row in rows:
            table.add_row(*(self._cell(row[c]) for c in columns))
        self.console.print(table)
        self.console.print(f"Models saved under {config.output_dir}")
        return EXIT_OK

    def cmd_eval(self, args) -> int:
        """Execute eval command"""
        config = self.load_config(args)
        data = load_data(config)
        reporter = ExperimentReportGenerator(config.output_dir)

        if args.model:
            targets = [(Path(args.model), Path(args.out) if args.out else Path(args.model).parent)]
        else:
            targets = [
                (run_dir(config.output_dir, method, seed) / MODEL_FILE, run_dir(config.output_dir, method, seed))
                for method in config.methods
                for seed in config.seeds
            ]

        reports = []
        for model_path, directory in targets:
            params, metadata = load_model(model_path)
            method = metadata.get("method", config.train.method)
            seed = int(metadata.get("seed", config.seeds[0]))
            report = evaluate_run(config, params, train_config_for(config, method, seed), data.test)
            reporter.write_eval(report, directory)
            reports.append(report)

        self._display_eval(reports)
        return EXIT_OK

    def cmd_verify(self, args) -> int:
        """Execute verify command"""
        config = self.load_config(args)
        data = load_data(config)
        if args.model:
            params, _ = load_model(args.model)
            spec = model_spec_for(config, data)
            if params.spec.input_shape != spec.input_shape:
                raise ModelSpecError(
                    f"Model input shape {params.spec.input_shape} does not match dataset {spec.input_shape}"
                )
        else:
            method, seed = config.methods[0], config.seeds[0]
            self.console.print(f"Training {method} (seed {seed}) for verification...")
            params = train_job(config, method, seed, evaluate_after=False).params

        count = min(config.verify.n_inputs, len(data.test))
        inputs, labels = data.test.images[:count], data.test.labels[:count]
        results = TheoryValidator(config.verify).validate(params, inputs, labels)
        curvature = curvature_report(params, inputs, labels)
        results["curvature"] = curvature.means()

        reporter = ExperimentReportGenerator(config.output_dir)
        reporter.write_verify(results)
        write_csv(curvature.per_input, Path(config.output_dir) / CURVATURE_FILE)

        self._display_verify(results)
        return EXIT_OK if results["passed"] else EXIT_CHECK_FAILED

    def cmd_sweep(self, args) -> int:
        """Execute sweep command"""
        config = self.load_config(args)
        frame = run_sweep(config)
        path = ExperimentReportGenerator(config.output_dir).write_sweep(frame)

        table = Table(title="DiGN sweep")
        for column in frame.columns:
            table.add_column(column)
        for row in frame.itertuples(index=False):
            table.add_row(*(self._cell(v) for v in row))
        self.console.print(table)
        self.console.print(f"Sweep saved to {path}")
        return EXIT_OK

    def cmd_report(self, args) -> int:
        """Execute report command"""
        config = self.load_config(args)
        reporter = ExperimentReportGenerator(config.output_dir)
        digest = config_hash(config)

        records = []
        for method in config.methods:
            results, record = run_method(config, method, evaluate_after=True)
            for result in results:
                directory = run_dir(config.output_dir, method, result.seed)
                save_model(
                    directory / MODEL_FILE,
                    result.params,
                    {"method": method, "seed": result.seed, "config_hash": digest},
                )
                result.history.to_csv(directory / HISTORY_FILE)
                reporter.write_eval(result.report, directory)
            reporter.write_run_record(record)
            records.append(record)

        frame = comparison_frame(records)
        paths = reporter.write_comparison(frame, digest)

        table = Table(title="Method comparison (mean ± std over seeds)")
        for column in ("method", "clean_acc", "mca", "mca_n", "rmse_n"):
            table.add_column(column)
        for row in frame.to_dict(orient="records"):
            table.add_row(
                row["method"],
                *(self._mean_std(row, m) for m in ("clean_acc", "mca", "mca_n", "rmse_n")),
            )
        self.console.print(table)
        self.console.print(f"Comparison saved to {paths[0]} and {paths[1]}")
        return EXIT_OK

    def cmd_list_presets(self, args) -> int:
        """Execute list-presets command"""
        self.console.print("\nAvailable Experiment Presets:\n")
        for name, description in list_presets().items():
            self.console.print(f"  • {name.replace('_', '-')}")
            self.console.print(f"    {description}")
            if args.verbose:
                config = load_config(preset=name).config
                train = config.train
                self.console.print(
                    f"    epochs {train.epochs}, lambda {train.lam}, sigma_max {train.sigma_max}, "
                    f"n {train.n_samples}, methods {', '.join(config.methods)}"
                )
            self.console.print()
        return EXIT_OK

    def _display_eval(self, reports: Sequence[EvalReport]) -> None:
        table = Table(title="Evaluation")
        for column in ("method", "seed", "clean_acc", "mca", "mca_n", "rmse_clean", "rmse_n"):
            table.add_column(column)
        for report in reports:
            row = report.summary_row()
            table.add_row(
                str(report.metadata.get("method", "")),
                self._cell(row["seed"]),
                *(self._cell(row[c]) for c in ("clean_acc", "mca", "mca_n", "rmse_clean", "rmse_n")),
            )
        self.console.print(table)

    def _display_verify(self, results: Dict[str, Any]) -> None:
        """Display theory check results"""
        table = Table(title=f"Theory checks ({results['n_inputs']} inputs)")
        table.add_column("check")
        table.add_column("status")
        table.add_column("detail")
        for name, check in results["checks"].items():
            status = "[green]PASS[/green]" if check["passed"] else "[red]FAIL[/red]"
            table.add_row(name, status, check.get("message", ""))
        self.console.print(table)
        self.console.print(results["summary"])

    @staticmethod
    def _cell(value: Any) -> str:
        if value is None:
            return "n/a"
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    @classmethod
    def _mean_std(cls, row: Dict[str, Any], metric: str) -> str:
        mean, std = row.get(f"{metric}_mean"), row.get(f"{metric}_std")
        if std is None or std != std:
            return cls._cell(mean)
        return f"{cls._cell(mean)} ± {std:.4f}"

    def run(self, argv: Optional[List[str]] = None) -> int:
        """Main entry point"""
        args = self.parser.parse_args(argv)

        if not args.command:
            self.parser.print_help()
            return EXIT_OK

        setup_logging(args.verbose, args.quiet)
        try:
            handler = getattr(self, f"cmd_{args.command.replace('-', '_')}")
            return handler(args)
        except IO_ERRORS as e:
            self.console.print(f"[red]I/O ERROR:[/red] {e}")
            return EXIT_IO
        except VALIDATION_ERRORS as e:
            self.console.print(f"[red]ERROR:[/red] {e}")
            if args.verbose:
                self.console.print_exception()
            return EXIT_VALIDATION


def main():
    """CLI entry point"""
    cli = ExperimentCLI()
    sys.exit(cli.run())


if __name__ == "__main__":
    main()
