"""
Unit tests for the reverse-mode differentiation engine.

Tests cover:
- Tape bookkeeping and backward() contracts
- Closed-form gradients of individual operations
- Finite-difference agreement of composite expressions
- Shape errors
"""

import numpy as np
import pytest

from src.autodiff import ops
from src.autodiff.gradcheck import grad_check, numeric_gradient, relative_error
from src.autodiff.tape import (
    ContractError,
    DimensionError,
    Tape,
    Tensor,
    constant,
)
from src.rng import NoiseStream


@pytest.fixture
def stream():
    return NoiseStream(1234)


class TestTensor:
    """Test the immutable tensor wrapper."""

    def test_payload_is_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_numpy_returns_writable_copy(self):
        t = Tensor([1.0, 2.0])
        copy = t.numpy()
        copy[0] = 9.0
        assert t.data[0] == 1.0

    def test_item_requires_single_value(self):
        assert Tensor(3.5).item() == 3.5
        with pytest.raises(ContractError, match="single value"):
            Tensor([1.0, 2.0]).item()

    def test_constant_has_no_tape(self):
        assert constant(np.ones(3)).tape is None


class TestTape:
    """Test backward() contracts."""

    def test_identity_gradient_is_ones(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, -2.0, 3.0]))
        grads = tape.backward(ops.sum_all(x))
        np.testing.assert_array_equal(grads[x], np.ones(3))

    def test_unused_leaf_gets_zeros(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, 2.0]))
        unused = tape.leaf(np.ones((2, 3)))
        grads = tape.backward(ops.sum_all(x))
        np.testing.assert_array_equal(grads[unused], np.zeros((2, 3)))

    def test_non_scalar_root_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ContractError, match="scalar root"):
            tape.backward(ops.scale(x, 2.0))

    def test_root_from_other_tape_rejected(self):
        a, b = Tape(), Tape()
        x = b.leaf(np.ones(2))
        with pytest.raises(ContractError, match="recorded on this tape"):
            a.backward(ops.sum_all(x))

    def test_mixing_tapes_rejected(self):
        x = Tape().leaf(np.ones(2))
        y = Tape().leaf(np.ones(2))
        with pytest.raises(ContractError, match="different tapes"):
            ops.add(x, y)

    def test_shared_leaf_accumulates(self):
        """x used twice: d/dx (x * x) summed = 2x."""
        tape = Tape()
        x = tape.leaf(np.array([1.5, -2.0]))
        grads = tape.backward(ops.sum_all(ops.mul(x, x)))
        np.testing.assert_allclose(grads[x], [3.0, -4.0])

    def test_constants_do_not_record(self):
        out = ops.add(Tensor([1.0]), Tensor([2.0]))
        assert out.tape is None
        assert out.data[0] == 3.0

    def test_foreign_leaf_lookup_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(2))
        grads = tape.backward(ops.sum_all(x))
        other = Tape().leaf(np.ones(2))
        other.node_id = 99
        with pytest.raises(ContractError, match="not a leaf"):
            grads[other]


class TestOperationGradients:
    """Closed-form gradients of single operations."""

    def test_affine_gradients(self):
        tape = Tape()
        x = tape.leaf(np.array([[1.0, 2.0]]))
        w = tape.leaf(np.array([[1.0, 0.0, -1.0], [2.0, 1.0, 0.5]]))
        b = tape.leaf(np.zeros(3))
        grads = tape.backward(ops.sum_all(ops.affine(x, w, b)))
        np.testing.assert_allclose(grads[x], [[0.0, 3.5]])
        np.testing.assert_allclose(grads[w], [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
        np.testing.assert_allclose(grads[b], [1.0, 1.0, 1.0])

    def test_relu_subgradient_at_zero_is_zero(self):
        tape = Tape()
        x = tape.leaf(np.array([-1.0, 0.0, 2.0]))
        grads = tape.backward(ops.sum_all(ops.relu(x)))
        np.testing.assert_array_equal(grads[x], [0.0, 0.0, 1.0])

    def test_log_softmax_rows_normalize(self, stream):
        z = Tensor(stream.normal((4, 5)) * 10)
        out = ops.log_softmax(z)
        np.testing.assert_allclose(np.exp(out.data).sum(axis=1), np.ones(4), atol=1e-12)

    def test_log_softmax_stable_for_large_logits(self):
        out = ops.log_softmax(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_pick_gradient_is_one_hot(self):
        tape = Tape()
        a = tape.leaf(np.zeros((2, 3)))
        grads = tape.backward(ops.sum_all(ops.pick(a, [2, 0])))
        np.testing.assert_array_equal(grads[a], [[0, 0, 1], [1, 0, 0]])

    def test_take_gradient(self):
        tape = Tape()
        a = tape.leaf(np.ones((2, 2)))
        grads = tape.backward(ops.take(a, (1, 0)))
        np.testing.assert_array_equal(grads[a], [[0, 0], [1, 0]])

    def test_global_avg_pool_spreads_evenly(self):
        tape = Tape()
        x = tape.leaf(np.ones((1, 2, 2, 2)))
        grads = tape.backward(ops.sum_all(ops.global_avg_pool(x)))
        np.testing.assert_allclose(grads[x], np.full((1, 2, 2, 2), 0.25))

    def test_conv2d_same_preserves_spatial_shape(self, stream):
        x = Tensor(stream.normal((2, 3, 5, 6)))
        k = Tensor(stream.normal((4, 3, 3, 3)))
        assert ops.conv2d(x, k).shape == (2, 4, 5, 6)
        assert ops.conv2d(x, k, padding="valid").shape == (2, 4, 3, 4)

    def test_conv2d_is_cross_correlation(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 1.0
        kernel = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
        out = ops.conv2d(Tensor(x), Tensor(kernel)).data[0, 0]
        # a centered impulse reproduces the kernel rotated by 180 degrees
        np.testing.assert_array_equal(out, kernel[0, 0, ::-1, ::-1])


class TestShapeErrors:
    """Shape mismatches name both shapes."""

    def test_affine_mismatch(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            ops.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), Tensor(np.ones(5)))

    def test_affine_bias_mismatch(self):
        with pytest.raises(DimensionError, match="bias"):
            ops.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), Tensor(np.ones(3)))

    def test_add_requires_same_shape(self):
        with pytest.raises(DimensionError, match="must match"):
            ops.add(Tensor(np.ones(2)), Tensor(np.ones(3)))

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(DimensionError, match="channels"):
            ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_conv2d_even_kernel(self):
        with pytest.raises(ContractError, match="odd"):
            ops.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))

    def test_conv2d_kernel_larger_than_input(self):
        with pytest.raises(DimensionError, match="larger"):
            ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), padding="valid")

    def test_log_softmax_needs_two_classes(self):
        with pytest.raises(DimensionError):
            ops.log_softmax(Tensor(np.ones((3, 1))))


class TestGradCheck:
    """Finite-difference agreement of composite expressions."""

    def test_numeric_gradient_of_square(self):
        grad = numeric_gradient(lambda t: ops.sum_all(ops.mul(t, t)), np.array([1.0, -3.0]))
        np.testing.assert_allclose(grad, [2.0, -6.0], rtol=1e-8)

    def test_nonpositive_step_rejected(self):
        with pytest.raises(ContractError, match="positive"):
            numeric_gradient(ops.sum_all, np.ones(2), h=0.0)

    def test_relative_error_zero_for_identical(self):
        assert relative_error(np.ones(3), np.ones(3)) == 0.0

    def test_mlp_cross_entropy_input_gradient(self, stream):
        w1 = Tensor(stream.normal((6, 5)) * 0.5)
        b1 = Tensor(stream.normal(5) * 0.1)
        w2 = Tensor(stream.normal((5, 3)) * 0.5)
        b2 = Tensor(np.zeros(3))

        def loss(x):
            h = ops.relu(ops.affine(x, w1, b1))
            logp = ops.log_softmax(ops.affine(h, w2, b2))
            return ops.scale(ops.mean_all(ops.pick(logp, [0, 2])), -1.0)

        assert grad_check(loss, stream.normal((2, 6))) <= 1e-6

    def test_conv_pipeline_kernel_gradient(self, stream):
        x = Tensor(stream.normal((2, 2, 5, 5)))
        head = Tensor(stream.normal((3, 2)))

        def loss(k):
            feats = ops.global_avg_pool(ops.relu(ops.conv2d(x, k)))
            logp = ops.log_softmax(ops.affine(feats, head, Tensor(np.zeros(2))))
            return ops.sum_all(ops.pick(logp, [1, 0]))

        assert grad_check(loss, stream.normal((3, 2, 3, 3))) <= 1e-6

    def test_kl_style_expression(self, stream):
        q = Tensor(stream.normal((3, 4)))

        def loss(z):
            log_p = ops.log_softmax(z)
            log_q = ops.log_softmax(q)
            return ops.sum_all(ops.mul(ops.exp(log_p), ops.sub(log_p, log_q)))

        assert grad_check(loss, stream.normal((3, 4))) <= 1e-6

    @pytest.mark.parametrize("case", range(100))
    def test_seeded_composites(self, case):
        s = NoiseStream(99, case)
        w = Tensor(s.normal((4, 3)))
        b = Tensor(s.normal(3))

        def loss(x):
            logp = ops.log_softmax(ops.affine(ops.relu(x), w, b))
            return ops.dot(logp, Tensor(np.ones((2, 3))))

        # keep inputs away from the relu kink
        point = s.normal((2, 4))
        point = np.where(np.abs(point) < 1e-3, 0.5, point)
        assert grad_check(loss, point) <= 1e-6
