"""
Unit tests for accuracy, mCA, mCA-N, RMS calibration error and evaluate().
"""

import numpy as np
import pytest

from src.datasets import SynthSpec, generate_synth
from src.metrics import (
    DETAIL_COLUMNS,
    SUMMARY_COLUMNS,
    CalibrationInput,
    EvalReport,
    MetricsError,
    accuracy,
    evaluate,
    mca,
    mca_noise,
    rms_calibration_error,
)
from src.models import build_model_spec, init_params, zero_params

KINDS = ["gaussian", "shot", "impulse", "speckle"]


@pytest.fixture(scope="module")
def test_set():
    _, _, test = generate_synth(
        SynthSpec(num_classes=3, height=6, width=6, train_per_class=2, val_per_class=2, test_per_class=10)
    )
    return test


@pytest.fixture(scope="module")
def params(test_set):
    return init_params(build_model_spec("mlp_64_32", test_set.input_shape, 3), 0)


class TestAccuracy:
    """Test plain accuracy."""

    def test_all_correct(self):
        assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0

    def test_none_correct(self):
        assert accuracy([1, 2, 0], [0, 1, 2]) == 0.0

    def test_three_of_four(self):
        assert accuracy([0, 1, 1, 3], [0, 1, 2, 3]) == 0.75

    def test_empty(self):
        with pytest.raises(MetricsError, match="empty"):
            accuracy([], [])

    def test_length_mismatch(self):
        with pytest.raises(MetricsError):
            accuracy([0, 1], [0])


class TestMeanCorruptionAccuracy:
    """Test mCA and mCA-N."""

    def test_two_by_two_fixture(self):
        assert mca(np.array([[0.5, 0.7], [0.9, 0.3]])) == pytest.approx(0.6, abs=1e-15)

    def test_all_ones(self):
        assert mca(np.ones((4, 5))) == 1.0

    def test_empty_matrix(self):
        with pytest.raises(MetricsError, match="non-empty"):
            mca(np.zeros((0, 5)))

    def test_gaussian_row_excluded_by_default(self):
        matrix = np.array([[0.0] * 5, [0.6] * 5, [0.8] * 5, [1.0] * 5])
        assert mca_noise(matrix, KINDS) == pytest.approx(0.8)

    def test_single_kind_is_row_mean(self):
        matrix = np.array([[0.1, 0.2], [0.3, 0.5]])
        assert mca_noise(matrix, ["gaussian", "shot"], include=["shot"]) == pytest.approx(0.4)

    def test_all_kinds_equals_mca(self):
        matrix = np.arange(20, dtype=float).reshape(4, 5) / 20
        assert mca_noise(matrix, KINDS, include=KINDS) == pytest.approx(mca(matrix), abs=1e-15)

    def test_unknown_kind(self):
        with pytest.raises(MetricsError, match="Unknown corruption kind 'fog'"):
            mca_noise(np.ones((1, 5)), ["fog"])

    def test_no_noise_rows(self):
        with pytest.raises(MetricsError, match="None of"):
            mca_noise(np.ones((1, 5)), ["gaussian"])


class TestCalibration:
    """Test RMS calibration error."""

    def test_perfectly_calibrated(self):
        inputs = CalibrationInput(np.full(10, 0.8), np.array([1] * 8 + [0] * 2, dtype=bool))
        assert rms_calibration_error(inputs) == pytest.approx(0.0, abs=1e-15)

    def test_hand_example(self):
        inputs = CalibrationInput(np.array([0.6, 0.7, 0.8, 0.9]), np.array([0, 0, 1, 1], dtype=bool), n_bins=2)
        assert abs(rms_calibration_error(inputs) - 0.25) <= 1e-12

    def test_confident_and_wrong(self):
        inputs = CalibrationInput(np.array([1.0]), np.array([False]))
        assert rms_calibration_error(inputs) == 1.0

    def test_order_invariant(self):
        conf = np.linspace(0.34, 0.99, 40)
        flags = (np.arange(40) % 3) == 0
        order = np.arange(40)[::-1]
        a = rms_calibration_error(CalibrationInput(conf, flags))
        b = rms_calibration_error(CalibrationInput(conf[order], flags[order]))
        assert a == pytest.approx(b, abs=1e-15)

    def test_bounded(self):
        conf = np.linspace(0.5, 1.0, 25)
        value = rms_calibration_error(CalibrationInput(conf, np.zeros(25, dtype=bool)))
        assert 0.0 <= value <= 1.0

    def test_out_of_range_confidence(self):
        with pytest.raises(MetricsError, match=r"\[0, 1\]"):
            rms_calibration_error(CalibrationInput(np.array([1.2]), np.array([True])))

    def test_from_probabilities(self):
        p = np.array([[0.7, 0.3], [0.2, 0.8]])
        inputs = CalibrationInput.from_probabilities(p, [0, 0], n_bins=10)
        np.testing.assert_allclose(inputs.confidences, [0.7, 0.8])
        np.testing.assert_array_equal(inputs.correct, [True, False])
        assert inputs.num_classes == 2

    def test_confidence_below_chance_rejected(self):
        inputs = CalibrationInput(np.array([0.2, 0.9]), np.array([True, True]), num_classes=3)
        with pytest.raises(MetricsError, match="below 1/K"):
            rms_calibration_error(inputs)

    def test_uniform_probabilities_accepted(self):
        p = np.exp(np.full((4, 3), -np.log(3.0)))
        inputs = CalibrationInput.from_probabilities(p, [0, 1, 2, 0])
        assert 0.0 <= rms_calibration_error(inputs) <= 1.0

    def test_invalid_class_count(self):
        with pytest.raises(MetricsError, match="num_classes"):
            rms_calibration_error(CalibrationInput(np.array([0.5]), np.array([True]), num_classes=0))


class TestEvaluate:
    """Test report assembly."""

    def test_clean_only(self, params, test_set):
        report = evaluate(params, test_set, kinds=[])
        assert report.accuracy_matrix.size == 0
        assert report.mca is None and report.mca_n is None
        assert report.corrupt_rmse is None and report.corrupt_rmse_n is None
        assert 0.0 <= report.clean_accuracy <= 1.0

    def test_matrix_and_means_consistent(self, params, test_set):
        report = evaluate(params, test_set, kinds=KINDS, severities=[1, 3], seed=2)
        assert report.accuracy_matrix.shape == (4, 2)
        assert abs(report.mca - report.accuracy_matrix.mean()) <= 1e-12
        assert abs(report.mca_n - report.accuracy_matrix[1:].mean()) <= 1e-12
        assert 0.0 <= report.corrupt_rmse <= 1.0

    def test_deterministic(self, params, test_set):
        a = evaluate(params, test_set, kinds=["shot"], severities=[5], seed=1)
        b = evaluate(params, test_set, kinds=["shot"], severities=[5], seed=1)
        assert a.to_dict() == b.to_dict()

    def test_kind_subset_keeps_cell_draws(self, params, test_set):
        full = evaluate(params, test_set, kinds=KINDS, severities=[2], seed=4)
        only = evaluate(params, test_set, kinds=["speckle"], severities=[2], seed=4)
        assert only.accuracy_matrix[0, 0] == full.accuracy_matrix[3, 0]

    def test_zero_model_is_chance(self, test_set):
        zero = zero_params(build_model_spec("linear", test_set.input_shape, 3))
        report = evaluate(zero, test_set, kinds=["impulse"], severities=[1])
        assert report.clean_accuracy == pytest.approx(1 / 3)
        assert report.accuracy_matrix[0, 0] == pytest.approx(1 / 3)

    def test_probability_fn_override(self, params, test_set):
        uniform = lambda images: np.full((images.shape[0], 3), 1.0 / 3.0)
        report = evaluate(params, test_set, kinds=[], probability_fn=uniform)
        assert report.clean_accuracy == pytest.approx(1 / 3)

    def test_metadata_and_seed(self, params, test_set):
        report = evaluate(params, test_set, kinds=[], seed=7, metadata={"method": "DiGN"})
        assert report.seed == 7
        assert report.metadata["method"] == "DiGN"
        assert report.metadata["dataset"] == test_set.id

    def test_unknown_kind(self, params, test_set):
        with pytest.raises(MetricsError):
            evaluate(params, test_set, kinds=["fog"])

    def test_frames(self, params, test_set):
        report = evaluate(params, test_set, kinds=["shot", "speckle"], severities=[1, 2, 3])
        detail = report.detail_frame()
        assert list(detail.columns) == DETAIL_COLUMNS
        assert len(detail) == 6
        assert detail["accuracy"].mean() == pytest.approx(report.mca, abs=1e-12)
        summary = report.summary_frame()
        assert list(summary.columns) == SUMMARY_COLUMNS
        assert summary.loc[0, "clean_acc"] == report.clean_accuracy

    def test_dict_round_trip(self, params, test_set):
        report = evaluate(params, test_set, kinds=["gaussian"], severities=[1, 2])
        back = EvalReport.from_dict(report.to_dict())
        np.testing.assert_array_equal(back.accuracy_matrix, report.accuracy_matrix)
        assert back.to_dict() == report.to_dict()
