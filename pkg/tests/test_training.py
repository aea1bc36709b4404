"""
Unit tests for the training losses, attack loops, optimizer and the training
loop.
"""

import numpy as np
import pandas as pd
import pytest

from src.autodiff import ops
from src.autodiff.gradcheck import grad_check
from src.autodiff.tape import Tensor
from src.config_loader import METHODS, AttackConfig, TrainConfig
from src.datasets import Dataset, SynthSpec, generate_synth
from src.models import build_model_spec, init_params, predict, zero_params
from src.rng import STREAM_ENSEMBLE, NoiseStream
from src.training import (
    SGDState,
    TrainHistory,
    TrainingError,
    at_loss,
    cross_entropy,
    dign_loss,
    gn_loss,
    kl_div,
    pgd,
    rse_loss,
    rse_predict,
    rse_probs,
    sample_noise,
    sgd_update,
    step_lr,
    train,
    trades_loss,
    trades_perturbation,
)
from src.training.attacks import project
from src.training.losses import model_log_probs, running_mean
from src.training.trainer import HISTORY_COLUMNS, predict_for, select_epoch


@pytest.fixture(scope="module")
def data():
    return generate_synth(
        SynthSpec(num_classes=3, height=4, width=4, train_per_class=8, val_per_class=4, test_per_class=4)
    )


@pytest.fixture
def linear_spec():
    return build_model_spec("linear", (1, 4, 4), 3)


@pytest.fixture
def weights(linear_spec):
    return init_params(linear_spec, 11).constants()


@pytest.fixture
def batch(data):
    train_set = data[0]
    return Tensor(train_set.images[:6]), train_set.labels[:6]


def clean_ce(spec, weights, x, y):
    return cross_entropy(model_log_probs(spec, weights, x), y).item()


class TestLosses:
    """Test cross-entropy, KL and the noisy objectives."""

    def test_uniform_cross_entropy_is_log_k(self):
        log_p = ops.log_softmax(Tensor(np.zeros((2, 3))))
        assert cross_entropy(log_p, [0, 2]).item() == pytest.approx(np.log(3.0))

    def test_bad_label_is_named(self):
        log_p = ops.log_softmax(Tensor(np.zeros((2, 3))))
        with pytest.raises(TrainingError, match="Label 3 at index 1"):
            cross_entropy(log_p, [0, 3])

    def test_kl_of_identical_distributions_is_zero(self):
        log_p = ops.log_softmax(Tensor(NoiseStream(2).normal((4, 5))))
        assert kl_div(log_p, log_p).item() == 0.0

    def test_kl_is_nonnegative(self):
        s = NoiseStream(3)
        log_p = ops.log_softmax(Tensor(s.normal((4, 5))))
        log_q = ops.log_softmax(Tensor(s.normal((4, 5))))
        assert kl_div(log_p, log_q).item() > 0.0

    def test_sample_noise_scales(self):
        sigmas, delta = sample_noise((50, 1, 2, 2), 0.3, NoiseStream(0))
        assert sigmas.shape == (50,)
        assert np.all((sigmas >= 0.0) & (sigmas < 0.3))
        assert delta.shape == (50, 1, 2, 2)

    def test_sample_noise_scale_moments(self):
        sigmas, _ = sample_noise((20_000, 1), 0.3, NoiseStream(1))
        # U(0, s): mean s/2, variance s^2/12; 5 standard errors
        assert np.mean(sigmas) == pytest.approx(0.15, abs=5 * 0.3 / np.sqrt(12 * 20_000))
        assert np.var(sigmas) == pytest.approx(0.3**2 / 12, rel=0.05)

    def test_sample_noise_per_example_scale(self):
        sigmas, delta = sample_noise((4_000, 1, 4, 4), 0.3, NoiseStream(2))
        per_example = delta.data.reshape(4_000, -1)
        # each example's noise is scaled by its own sigma
        ratio = per_example.std(axis=1) / sigmas
        assert np.median(ratio) == pytest.approx(1.0, abs=0.1)
        assert abs(np.corrcoef(sigmas[:-1], sigmas[1:])[0, 1]) < 0.05
        assert abs(np.corrcoef(per_example[:, 0], per_example[:, 1])[0, 1]) < 0.05

    def test_sample_noise_is_deterministic(self):
        a_sigmas, a_delta = sample_noise((8, 1, 2, 2), 0.2, NoiseStream(3, 1))
        b_sigmas, b_delta = sample_noise((8, 1, 2, 2), 0.2, NoiseStream(3, 1))
        np.testing.assert_array_equal(a_sigmas, b_sigmas)
        np.testing.assert_array_equal(a_delta.data, b_delta.data)
        c_sigmas, _ = sample_noise((8, 1, 2, 2), 0.2, NoiseStream(3, 2))
        assert not np.array_equal(a_sigmas, c_sigmas)

    def test_sample_noise_zero_scale(self):
        sigmas, delta = sample_noise((5, 1, 2, 2), 0.0, NoiseStream(4))
        assert np.all(sigmas == 0.0)
        assert np.all(delta.data == 0.0)

    def test_dign_without_consistency_weight_is_cross_entropy(self, linear_spec, weights, batch):
        x, y = batch
        loss = dign_loss(linear_spec, weights, x, y, 0.0, 0.2, 3, NoiseStream(1))
        assert loss.item() == pytest.approx(clean_ce(linear_spec, weights, x, y), abs=1e-15)

    def test_dign_with_zero_noise_is_cross_entropy(self, linear_spec, weights, batch):
        x, y = batch
        loss = dign_loss(linear_spec, weights, x, y, 0.7, 0.0, 2, NoiseStream(1))
        assert loss.item() == pytest.approx(clean_ce(linear_spec, weights, x, y), abs=1e-15)

    def test_dign_regularizer_adds_positive_term(self, linear_spec, weights, batch):
        x, y = batch
        loss = dign_loss(linear_spec, weights, x, y, 1.0, 0.5, 2, NoiseStream(1))
        assert loss.item() > clean_ce(linear_spec, weights, x, y)

    def test_dign_weight_gradient(self, linear_spec, weights, batch):
        x, y = batch

        def loss(w):
            return dign_loss(linear_spec, {**weights, "1.weight": w}, x, y, 0.5, 0.2, 2, NoiseStream(5))

        assert grad_check(loss, weights["1.weight"].data) <= 1e-6

    def test_dign_input_gradient(self, linear_spec, weights, batch):
        x, y = batch

        def loss(point):
            return dign_loss(linear_spec, weights, point, y[:2], 0.5, 0.2, 2, NoiseStream(5))

        assert grad_check(loss, x.data[:2]) <= 1e-6

    @pytest.mark.parametrize("seed", range(8))
    def test_gn_with_zero_noise_is_cross_entropy(self, linear_spec, batch, seed):
        x, y = batch
        weights = init_params(linear_spec, seed).constants()
        loss = gn_loss(linear_spec, weights, x, y, 0.0, 3, NoiseStream(seed))
        assert loss.item() == clean_ce(linear_spec, weights, x, y)

    def test_running_mean_of_identical_terms_is_exact(self):
        term = Tensor(np.array(0.1))
        mean = None
        for k in range(7):
            mean = running_mean(mean, term, k)
        assert mean.item() == 0.1

    def test_running_mean_matches_average(self):
        values = [0.3, 1.7, -0.4, 2.2, 0.9]
        mean = None
        for k, value in enumerate(values):
            mean = running_mean(mean, Tensor(np.array(value)), k)
        assert mean.item() == pytest.approx(np.mean(values), abs=1e-14)

    def test_first_sample_uses_child_zero(self, linear_spec, weights, batch):
        x, y = batch
        _, delta = sample_noise(x.shape, 0.3, NoiseStream(4).child(0))
        expected = clean_ce(linear_spec, weights, ops.add(x, delta), y)
        loss = gn_loss(linear_spec, weights, x, y, 0.3, 1, NoiseStream(4))
        assert loss.item() == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("fn", ["dign", "gn"])
    def test_zero_samples_rejected(self, linear_spec, weights, batch, fn):
        x, y = batch
        with pytest.raises(TrainingError, match="n_samples"):
            if fn == "dign":
                dign_loss(linear_spec, weights, x, y, 0.2, 0.2, 0, NoiseStream(0))
            else:
                gn_loss(linear_spec, weights, x, y, 0.2, 0, NoiseStream(0))

    def test_rse_with_zero_sigma_is_cross_entropy(self, linear_spec, weights, batch):
        x, y = batch
        loss = rse_loss(linear_spec, weights, x, y, 0.0, NoiseStream(0))
        assert loss.item() == pytest.approx(clean_ce(linear_spec, weights, x, y), abs=1e-15)


class TestCompositeGradients:
    """Seeded finite-difference checks of every composite objective."""

    OBJECTIVES = ("cross_entropy", "kl_div", "dign", "trades_inner")

    @pytest.mark.parametrize("case", range(100))
    def test_matches_finite_differences(self, linear_spec, case):
        s = NoiseStream(31, case)
        weights = {
            name: Tensor(s.normal(tensor.data.shape))
            for name, tensor in init_params(linear_spec, case).constants().items()
        }
        x = s.uniform((2, 1, 4, 4))
        y = [case % 3, (case + 1) % 3]
        offset = Tensor(s.normal(x.shape) * 0.1)
        objective = self.OBJECTIVES[case % len(self.OBJECTIVES)]

        if objective == "cross_entropy":
            point = x

            def loss(v):
                return cross_entropy(model_log_probs(linear_spec, weights, v), y)

        elif objective == "kl_div":
            point = x

            def loss(v):
                clean = model_log_probs(linear_spec, weights, v)
                return kl_div(clean, model_log_probs(linear_spec, weights, ops.add(v, offset)))

        elif objective == "dign":
            point = x

            def loss(v):
                return dign_loss(linear_spec, weights, v, y, 0.5, 0.2, 2, NoiseStream(case))

        else:
            # with respect to the perturbation, clean side held fixed
            point = offset.data
            clean = model_log_probs(linear_spec, weights, Tensor(x))

            def loss(v):
                return kl_div(clean, model_log_probs(linear_spec, weights, ops.add(Tensor(x), v)))

        assert grad_check(loss, point) <= 1e-6


class TestRandomSelfEnsemble:
    """Test ensemble inference."""

    def test_probabilities_normalize(self, linear_spec, data):
        params = init_params(linear_spec, 0)
        p = rse_probs(params, data[2].images, 0.1, 5, NoiseStream(0))
        np.testing.assert_allclose(p.sum(axis=1), np.ones(len(data[2])), atol=1e-12)

    def test_zero_sigma_matches_plain_prediction(self, linear_spec, data):
        params = init_params(linear_spec, 0)
        images = data[2].images
        np.testing.assert_array_equal(rse_predict(params, images, 0.0, 3, NoiseStream(0)), predict(params, images))

    def test_ensemble_size_must_be_positive(self, linear_spec, data):
        with pytest.raises(TrainingError, match="rse_ensemble_n"):
            rse_probs(init_params(linear_spec, 0), data[2].images, 0.1, 0, NoiseStream(0))


class TestAttacks:
    """Test projection and the attack inner loops."""

    def test_linf_projection_clips(self):
        np.testing.assert_array_equal(project(np.array([[-2.0, 0.1, 3.0]]), 0.5, "inf"), [[-0.5, 0.1, 0.5]])

    def test_l2_projection_rescales_per_example(self):
        delta = np.array([[3.0, 4.0], [0.1, 0.0]])
        out = project(delta, 1.0, "2")
        np.testing.assert_allclose(out, [[0.6, 0.8], [0.1, 0.0]])

    def test_unknown_norm(self):
        with pytest.raises(TrainingError, match="norm"):
            project(np.zeros((1, 2)), 1.0, "1")

    def test_pgd_zero_radius_is_zero(self, linear_spec, weights, batch):
        x, y = batch
        delta = pgd(linear_spec, weights, x, y, AttackConfig(epsilon=0.0), NoiseStream(0))
        np.testing.assert_array_equal(delta.data, np.zeros(x.shape))

    @pytest.mark.parametrize("norm", ["inf", "2"])
    def test_pgd_stays_in_ball(self, linear_spec, weights, batch, norm):
        x, y = batch
        cfg = AttackConfig(epsilon=0.1, steps=5, norm=norm, random_start=True)
        delta = pgd(linear_spec, weights, x, y, cfg, NoiseStream(0)).data
        if norm == "inf":
            assert np.max(np.abs(delta)) <= 0.1 + 1e-15
        else:
            norms = np.sqrt((delta.reshape(len(delta), -1) ** 2).sum(axis=1))
            assert np.all(norms <= 0.1 + 1e-12)

    def test_pgd_increases_loss(self, linear_spec, weights, batch):
        x, y = batch
        delta = pgd(linear_spec, weights, x, y, AttackConfig(epsilon=0.1, steps=7), NoiseStream(0))
        adv = clean_ce(linear_spec, weights, ops.add(x, delta), y)
        assert adv > clean_ce(linear_spec, weights, x, y)

    def test_at_with_zero_radius_is_cross_entropy(self, linear_spec, weights, batch):
        x, y = batch
        loss = at_loss(linear_spec, weights, x, y, AttackConfig(epsilon=0.0), NoiseStream(0))
        assert loss.item() == pytest.approx(clean_ce(linear_spec, weights, x, y), abs=1e-15)

    def test_trades_zero_radius(self, linear_spec, weights, batch):
        x, _ = batch
        delta, trace = trades_perturbation(linear_spec, weights, x, AttackConfig(epsilon=0.0), NoiseStream(0))
        np.testing.assert_array_equal(delta.data, np.zeros(x.shape))
        assert trace == [0.0]

    def test_trades_trace_length(self, linear_spec, weights, batch):
        x, _ = batch
        cfg = AttackConfig(epsilon=0.05, steps=4)
        _, trace = trades_perturbation(linear_spec, weights, x, cfg, NoiseStream(0))
        assert len(trace) == 5
        assert trace[-1] >= 0.0

    def test_trades_without_weight_is_cross_entropy(self, linear_spec, weights, batch):
        x, y = batch
        loss = trades_loss(linear_spec, weights, x, y, 0.0, AttackConfig(epsilon=0.05, steps=2), NoiseStream(0))
        assert loss.item() == pytest.approx(clean_ce(linear_spec, weights, x, y), abs=1e-15)


class TestOptimizer:
    """Test Nesterov SGD and the learning-rate schedule."""

    def test_plain_gradient_step(self, linear_spec):
        params = init_params(linear_spec, 0)
        grads = {name: np.ones_like(value) for name, value in params.tensors.items()}
        updated, _ = sgd_update(params, grads, SGDState.zeros_like(params), 0.1, 0.0, 0.0)
        np.testing.assert_allclose(updated["1.weight"], params["1.weight"] - 0.1)

    def test_nesterov_first_step(self, linear_spec):
        params = zero_params(linear_spec)
        grads = {name: np.ones_like(value) for name, value in params.tensors.items()}
        updated, state = sgd_update(params, grads, SGDState.zeros_like(params), 0.1, 0.9, 0.0)
        np.testing.assert_allclose(updated["1.bias"], np.full(3, -0.19))
        np.testing.assert_allclose(state.velocity["1.bias"], np.full(3, -0.1))

    def test_weight_decay(self, linear_spec):
        params = init_params(linear_spec, 0)
        grads = {name: np.zeros_like(value) for name, value in params.tensors.items()}
        updated, _ = sgd_update(params, grads, SGDState.zeros_like(params), 0.5, 0.0, 0.1)
        np.testing.assert_allclose(updated["1.weight"], params["1.weight"] * 0.95)

    def test_inputs_untouched(self, linear_spec):
        params = init_params(linear_spec, 0)
        before = params["1.weight"].copy()
        grads = {name: np.ones_like(value) for name, value in params.tensors.items()}
        sgd_update(params, grads, SGDState.zeros_like(params), 0.1, 0.9, 0.0)
        np.testing.assert_array_equal(params["1.weight"], before)

    def test_missing_gradient(self, linear_spec):
        params = init_params(linear_spec, 0)
        with pytest.raises(TrainingError, match="Missing gradient"):
            sgd_update(params, {}, SGDState.zeros_like(params), 0.1, 0.9, 0.0)

    def test_step_schedule(self):
        config = TrainConfig(lr_init=0.1, lr_decay_factor=0.1, lr_decay_every=25)
        assert step_lr(0, config) == 0.1
        assert step_lr(24, config) == 0.1
        assert step_lr(25, config) == pytest.approx(0.01)
        assert step_lr(50, config) == pytest.approx(0.001)


class TestTrainHistory:
    """Test model selection bookkeeping."""

    def test_first_maximizer(self):
        assert select_epoch([0.5, 0.7, 0.7, 0.6]) == 1

    def test_empty(self):
        assert select_epoch([]) is None

    def test_csv_round_trip(self, tmp_path):
        history = TrainHistory([1.0, 0.5], [0.4, 0.6], [0.3, 0.5], [0.1, 0.1])
        path = history.to_csv(tmp_path / "history.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == HISTORY_COLUMNS
        back = TrainHistory.from_frame(frame)
        assert back.val_accuracy == [0.3, 0.5]
        assert back.selected_epoch == 1


class TestTrain:
    """Test the training loop."""

    def quick(self, **changes):
        values = dict(epochs=2, batch_size=8, lr_init=0.05, n_samples=2, rse_ensemble_n=2)
        values.update(changes)
        return TrainConfig(**values)

    def test_zero_epochs_returns_initialization(self, data, linear_spec):
        params, history = train(self.quick(epochs=0), data[0], data[1], linear_spec)
        assert params.equals(init_params(linear_spec, 0))
        assert len(history) == 0
        assert history.selected_epoch is None

    def test_deterministic(self, data, linear_spec):
        a, ha = train(self.quick(method="DiGN"), data[0], data[1], linear_spec)
        b, hb = train(self.quick(method="DiGN"), data[0], data[1], linear_spec)
        assert a.equals(b)
        assert ha.train_loss == hb.train_loss

    def test_seed_changes_result(self, data, linear_spec):
        a, _ = train(self.quick(seed=0), data[0], data[1], linear_spec)
        b, _ = train(self.quick(seed=1), data[0], data[1], linear_spec)
        assert not a.equals(b)

    def test_history_lengths(self, data, linear_spec):
        _, history = train(self.quick(epochs=3), data[0], data[1], linear_spec)
        frame = history.to_frame()
        assert len(frame) == 3
        assert history.selected_epoch == select_epoch(history.val_accuracy)
        assert history.lr == [0.05, 0.05, 0.05]

    @pytest.mark.parametrize("method", METHODS)
    def test_every_method_runs(self, data, linear_spec, method):
        config = self.quick(method=method, epochs=1, attack=AttackConfig(epsilon=0.05, steps=2))
        params, history = train(config, data[0], data[1], linear_spec)
        assert np.isfinite(history.train_loss[0])
        assert 0.0 <= history.val_accuracy[0] <= 1.0

    @pytest.mark.slow
    @pytest.mark.parametrize("method", METHODS)
    def test_loss_decreases_by_epoch_ten(self, linear_spec, method):
        train_set, val_set, _ = generate_synth(
            SynthSpec(num_classes=3, height=4, width=4, train_per_class=30, val_per_class=5, test_per_class=1)
        )
        config = TrainConfig(
            method=method,
            epochs=10,
            batch_size=10,
            lr_init=0.02,
            lr_decay_every=10,
            n_samples=2,
            rse_ensemble_n=2,
            attack=AttackConfig(epsilon=0.02, steps=2),
        )
        _, history = train(config, train_set, val_set, linear_spec)
        assert history.train_loss[9] < history.train_loss[0]

    def test_rse_selects_on_ensemble_accuracy(self, data, linear_spec):
        config = self.quick(method="RSE", epochs=3, rse_sigma=0.5, rse_ensemble_n=3)
        params, history = train(config, data[0], data[1], linear_spec)
        stream = NoiseStream(config.seed, STREAM_ENSEMBLE)
        expected = rse_predict(params, data[1].images, 0.5, 3, stream)
        assert history.val_accuracy[history.selected_epoch] == np.mean(expected == data[1].labels)

    def test_predict_for(self, data, linear_spec):
        params = init_params(linear_spec, 2)
        images = data[1].images
        np.testing.assert_array_equal(predict_for(params, self.quick(method="DiGN"), images), predict(params, images))
        rse = self.quick(method="RSE", rse_sigma=0.5, rse_ensemble_n=3, seed=4)
        expected = rse_predict(params, images, 0.5, 3, NoiseStream(4, STREAM_ENSEMBLE))
        np.testing.assert_array_equal(predict_for(params, rse, images), expected)

    def test_invalid_config(self, data, linear_spec):
        with pytest.raises(TrainingError, match="Invalid training configuration"):
            train(self.quick(batch_size=0), data[0], data[1], linear_spec)

    def test_class_mismatch(self, data, linear_spec):
        other = Dataset(data[1].images, np.zeros(len(data[1]), dtype=int), "two-class", 2)
        with pytest.raises(TrainingError, match="classes"):
            train(self.quick(), data[0], other, linear_spec)

    def test_shape_mismatch(self, data):
        spec = build_model_spec("linear", (1, 5, 5), 3)
        with pytest.raises(TrainingError, match="input shape"):
            train(self.quick(), data[0], data[1], spec)

    @pytest.mark.slow
    def test_learns_easy_benchmark(self):
        train_set, val_set, _ = generate_synth(
            SynthSpec(num_classes=2, height=8, width=8, train_per_class=40, val_per_class=20, test_per_class=1)
        )
        spec = build_model_spec("linear", train_set.input_shape, 2)
        config = TrainConfig(epochs=10, batch_size=16, lr_init=0.1, lr_decay_every=10)
        _, history = train(config, train_set, val_set, spec)
        assert max(history.val_accuracy) >= 0.75
