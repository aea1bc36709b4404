"""
Integration tests for the command-line interface.

Tests complete workflows on a tiny synthetic configuration.
"""

import io
from pathlib import Path

import pandas as pd
import pytest
import yaml  # pyright: ignore[reportMissingModuleSource]
from rich.console import Console

import src.cli as cli_module
from src.cli import CURVATURE_FILE, EXIT_CHECK_FAILED, EXIT_IO, EXIT_OK, EXIT_VALIDATION, MODEL_FILE, ExperimentCLI
from src.config_loader import DEFAULT_CONFIG_PATH, load_config
from src.models import build_model_spec, load_model, save_model, zero_params
from src.report.experiment_report import (
    COMPARISON_CSV_FILE,
    COMPARISON_MD_FILE,
    EVAL_JSON_FILE,
    HISTORY_FILE,
    RUN_RECORD_FILE,
    SWEEP_FILE,
    TRAIN_AGGREGATE_FILE,
    VERIFY_JSON_FILE,
)

TINY = {
    "metadata": {"name": "tiny"},
    "dataset": {"classes": 2, "height": 4, "width": 4, "train_per_class": 6, "val_per_class": 3, "test_per_class": 4},
    "model": "linear",
    "train": {"epochs": 1, "batch_size": 8, "n_samples": 1},
    "corruption": {"kinds": ["gaussian", "shot"], "severities": [1, 2]},
    "verify": {"n_inputs": 2, "mc_samples": 500, "perturbations": 100, "hutchinson_vectors": 50},
    "sweep": {"lambdas": [0.0, 0.4], "sigma_maxes": [0.1], "n_samples": [1]},
    "methods": ["Standard", "DiGN"],
    "seeds": [0, 1],
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


@pytest.fixture
def cli():
    return ExperimentCLI(console=Console(file=io.StringIO(), width=200))


def output(cli: ExperimentCLI) -> str:
    return cli.console.file.getvalue()


def snapshot(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.integration
class TestBasics:
    """Test commands that need no training."""

    def test_no_command_prints_help(self, cli, capsys):
        assert cli.run([]) == EXIT_OK
        assert "usage" in capsys.readouterr().out

    def test_list_presets(self, cli):
        assert cli.run(["list-presets"]) == EXIT_OK
        text = output(cli)
        assert "desk-quick" in text
        assert "paper-defaults" in text

    def test_list_presets_verbose(self, cli):
        assert cli.run(["list-presets", "--verbose"]) == EXIT_OK
        assert "epochs 150" in output(cli)

    def test_unknown_key_is_validation_error(self, cli, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("train:\n  epoch: 3\n")
        assert cli.run(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
        assert "Unknown key 'epoch'" in output(cli)

    def test_unknown_preset(self, cli, tmp_path):
        assert cli.run(["train", "--preset", "nope", "--out", str(tmp_path)]) == EXIT_VALIDATION

    def test_unknown_method(self, cli, config_file, tmp_path):
        args = ["train", "--config", str(config_file), "--out", str(tmp_path / "o"), "--method", "Mixup"]
        assert cli.run(args) == EXIT_VALIDATION

    def test_missing_model_is_io_error(self, cli, config_file, tmp_path):
        args = ["eval", "--config", str(config_file), "--model", str(tmp_path / "absent.txt")]
        assert cli.run(args) == EXIT_IO
        assert "not found" in output(cli)

    def test_eval_before_train_is_io_error(self, cli, config_file, tmp_path):
        assert cli.run(["eval", "--config", str(config_file), "--out", str(tmp_path / "empty")]) == EXIT_IO


@pytest.mark.integration
class TestConfigResolution:
    """Test which files feed the resolved configuration."""

    def resolve(self, cli, argv):
        return cli.load_config(cli.parser.parse_args(argv))

    def test_default_file_without_config_or_preset(self, cli, tmp_path, monkeypatch):
        default = tmp_path / "experiment.yaml"
        default.write_text("train:\n  epochs: 4\n")
        monkeypatch.setattr(cli_module, "DEFAULT_CONFIG_PATH", default)
        assert self.resolve(cli, ["train"]).train.epochs == 4

    def test_preset_skips_default_file(self, cli, tmp_path, monkeypatch):
        default = tmp_path / "experiment.yaml"
        default.write_text("train:\n  epochs: 4\n")
        monkeypatch.setattr(cli_module, "DEFAULT_CONFIG_PATH", default)
        assert self.resolve(cli, ["train", "--preset", "desk-quick"]).train.epochs == 3

    def test_config_replaces_default_file(self, cli, config_file, tmp_path, monkeypatch):
        monkeypatch.setattr(cli_module, "DEFAULT_CONFIG_PATH", tmp_path / "absent.yaml")
        assert self.resolve(cli, ["train", "--config", str(config_file)]).train.epochs == 1

    def test_shipped_default_file(self, cli):
        assert self.resolve(cli, ["train"]) == load_config(DEFAULT_CONFIG_PATH).config


@pytest.mark.integration
class TestTrainEvalReport:
    """Test the train, eval and report workflows."""

    def test_train_writes_models(self, cli, config_file, tmp_path):
        out = tmp_path / "runs"
        assert cli.run(["train", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
        for method in ("Standard", "DiGN"):
            assert (out / method / TRAIN_AGGREGATE_FILE).exists()
            for seed in (0, 1):
                run = out / method / f"seed_{seed}"
                _, metadata = load_model(run / MODEL_FILE)
                assert metadata["method"] == method
                assert metadata["seed"] == seed
                assert len(pd.read_csv(run / HISTORY_FILE)) == 1

    def test_single_seed_override(self, cli, config_file, tmp_path):
        out = tmp_path / "runs"
        args = ["train", "--config", str(config_file), "--out", str(out), "--seed", "5", "--method", "DiGN"]
        assert cli.run(args) == EXIT_OK
        assert (out / "DiGN" / "seed_5" / MODEL_FILE).exists()
        assert not (out / "DiGN" / "seed_0").exists()
        assert not (out / "Standard").exists()

    def test_train_then_eval(self, cli, config_file, tmp_path):
        out = tmp_path / "runs"
        assert cli.run(["train", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
        assert cli.run(["eval", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
        assert (out / "DiGN" / "seed_1" / EVAL_JSON_FILE).exists()

    def test_eval_single_model(self, cli, config_file, tmp_path):
        out = tmp_path / "runs"
        cli.run(["train", "--config", str(config_file), "--out", str(out), "--method", "Standard"])
        target = tmp_path / "single"
        model = out / "Standard" / "seed_0" / MODEL_FILE
        args = ["eval", "--config", str(config_file), "--model", str(model), "--out", str(target)]
        assert cli.run(args) == EXIT_OK
        assert (target / EVAL_JSON_FILE).exists()

    def test_report_writes_comparison(self, cli, config_file, tmp_path):
        out = tmp_path / "runs"
        assert cli.run(["report", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
        frame = pd.read_csv(out / COMPARISON_CSV_FILE)
        assert list(frame["method"]) == ["Standard", "DiGN"]
        assert (frame["n_seeds"] == 2).all()
        assert (out / COMPARISON_MD_FILE).read_text().startswith("# Robustness Comparison")
        assert (out / "DiGN" / RUN_RECORD_FILE).exists()

    def test_report_rerun_is_byte_identical(self, config_file, tmp_path):
        out = tmp_path / "runs"
        args = ["report", "--config", str(config_file), "--out", str(out)]
        assert ExperimentCLI(console=Console(file=io.StringIO())).run(args) == EXIT_OK
        first = snapshot(out)
        assert ExperimentCLI(console=Console(file=io.StringIO())).run(args) == EXIT_OK
        assert snapshot(out) == first

    @pytest.mark.slow
    def test_sweep(self, cli, config_file, tmp_path):
        out = tmp_path / "runs"
        assert cli.run(["sweep", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
        frame = pd.read_csv(out / SWEEP_FILE)
        assert len(frame) == 4
        assert frame["lambda"].tolist() == [0.0, 0.0, 0.4, 0.4]


@pytest.mark.integration
class TestVerify:
    """Test the verify command."""

    def test_zero_model_passes(self, cli, config_file, tmp_path):
        model = save_model(tmp_path / "zero.txt", zero_params(build_model_spec("linear", (1, 4, 4), 2)))
        out = tmp_path / "verify"
        args = ["verify", "--config", str(config_file), "--model", str(model), "--out", str(out)]
        assert cli.run(args) == EXIT_OK
        assert (out / VERIFY_JSON_FILE).exists()
        assert len(pd.read_csv(out / CURVATURE_FILE)) == 2
        assert "All theory checks passed" in output(cli)

    def test_shape_mismatch(self, cli, config_file, tmp_path):
        model = save_model(tmp_path / "wide.txt", zero_params(build_model_spec("linear", (1, 5, 5), 2)))
        args = ["verify", "--config", str(config_file), "--model", str(model), "--out", str(tmp_path / "v")]
        assert cli.run(args) == EXIT_VALIDATION

    def test_exit_codes_are_distinct(self):
        assert len({EXIT_OK, EXIT_VALIDATION, EXIT_CHECK_FAILED, EXIT_IO}) == 4
