"""Tests for the tensor kernels and their backward passes."""

import numpy as np
import pytest

from regional_adv.gradcheck import max_relative_error, numerical_gradient
from regional_adv.tensor import (
    LayerKind,
    LayerTape,
    Precision,
    ShapeError,
    conv2d,
    conv2d_backward,
    flatten,
    flatten_backward,
    linear,
    linear_backward,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_backward,
    residual_add,
    residual_add_backward,
    softmax,
    softmax_cross_entropy,
)

TOLERANCE = 1e-5
SEEDS = range(20)


def away_from_zero(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def direct_conv2d(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int, pad: int
) -> np.ndarray:
    """Cross-correlation by explicit loops over every output element."""
    n, _, h, w = x.shape
    k, _, kh, kw = weights.shape
    padded = np.zeros((n, x.shape[1], h + 2 * pad, w + 2 * pad))
    padded[:, :, pad : pad + h, pad : pad + w] = x
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, out_h, out_w))
    for s in range(n):
        for f in range(k):
            for i in range(out_h):
                for j in range(out_w):
                    window = padded[
                        s, :, i * stride : i * stride + kh, j * stride : j * stride + kw
                    ]
                    out[s, f, i, j] = np.sum(window * weights[f]) + bias[f]
    return out


class TestPrecision:
    """Test the precision modes."""

    def test_dtypes(self) -> None:
        """Test that each mode maps to its numpy dtype."""
        assert Precision.HIGH.dtype == np.float64
        assert Precision("standard").dtype == np.float32


class TestLayerTape:
    """Test the forward-op record."""

    def test_pop_is_last_in_first_out(self) -> None:
        """Test that entries come back in reverse order."""
        tape = LayerTape()
        tape.record(LayerKind.RELU, active=None)
        tape.record(LayerKind.FLATTEN, input_shape=(1, 2))

        assert tape.pop(LayerKind.FLATTEN).cache["input_shape"] == (1, 2)
        assert len(tape) == 1

    def test_pop_wrong_kind(self) -> None:
        """Test that a kind mismatch is reported."""
        tape = LayerTape()
        tape.record(LayerKind.RELU, active=None)

        with pytest.raises(ShapeError, match="tape out of order"):
            tape.pop(LayerKind.CONV)

    def test_pop_empty(self) -> None:
        """Test that popping an empty tape fails."""
        with pytest.raises(ShapeError, match="tape is empty"):
            LayerTape().pop(LayerKind.LINEAR)


class TestConv2d:
    """Test convolution forward and backward."""

    def test_known_output(self) -> None:
        """Test a hand-computed 2×2 kernel over a 3×3 input."""
        x = np.arange(9, dtype=np.float64).reshape(1, 3, 3)
        weights = np.array([[[[1.0, 0.0], [0.0, -1.0]]]])
        out = conv2d(x, weights, np.array([0.5]))

        # x[i, j] - x[i + 1, j + 1] is always -4
        np.testing.assert_array_equal(out, np.full((1, 2, 2), -3.5))

    def test_output_shape_with_stride_and_pad(self) -> None:
        """Test the output extent formula."""
        x = np.zeros((2, 3, 7, 7))
        out = conv2d(x, np.zeros((4, 3, 3, 3)), np.zeros(4), stride=2, pad=1)

        assert out.shape == (2, 4, 4, 4)

    def test_single_sample_keeps_rank(self) -> None:
        """Test that a C×H×W input gives a K×H′×W′ output."""
        out = conv2d(np.ones((3, 5, 5)), np.ones((2, 3, 3, 3)), np.zeros(2), pad=1)

        assert out.shape == (2, 5, 5)
        assert out[0, 2, 2] == 27.0

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_direct_loops(self, seed: int) -> None:
        """Test agreement with a looped convolution on random shapes."""
        rng = np.random.default_rng(100 + seed)
        channels, filters = rng.integers(1, 4, size=2)
        kernel = int(rng.choice([1, 3, 5]))
        side = int(rng.integers(kernel, 10))
        x = rng.standard_normal((2, channels, side, side))
        weights = rng.standard_normal((filters, channels, kernel, kernel))
        bias = rng.standard_normal(filters)

        out = conv2d(x, weights, bias, stride=2, pad=1)

        expected = direct_conv2d(x, weights, bias, stride=2, pad=1)
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-10)

    def test_identity_kernel(self) -> None:
        """Test that a centred delta kernel with pad 1 reproduces the input."""
        x = np.random.default_rng(0).standard_normal((2, 3, 6, 6))
        weights = np.zeros((3, 3, 3, 3))
        for channel in range(3):
            weights[channel, channel, 1, 1] = 1.0

        out = conv2d(x, weights, np.zeros(3), pad=1)

        np.testing.assert_allclose(out, x, rtol=0, atol=1e-12)

    def test_zero_upstream_gives_zero_gradients(self) -> None:
        """Test that a zero grad_out yields zero gradients everywhere."""
        rng = np.random.default_rng(1)
        tape = LayerTape()
        out = conv2d(
            rng.standard_normal((2, 2, 5, 5)),
            rng.standard_normal((3, 2, 3, 3)),
            rng.standard_normal(3),
            stride=2,
            pad=1,
            tape=tape,
        )

        grads = conv2d_backward(tape.pop(LayerKind.CONV), np.zeros_like(out))

        for grad in grads:
            assert not np.any(grad)

    def test_channel_mismatch(self) -> None:
        """Test that mismatched input channels raise ShapeError."""
        with pytest.raises(ShapeError):
            conv2d(np.zeros((2, 5, 5)), np.zeros((4, 3, 3, 3)), np.zeros(4))

    def test_kernel_larger_than_input(self) -> None:
        """Test that an empty output extent raises ShapeError."""
        with pytest.raises(ShapeError):
            conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients_match_finite_differences(self, seed: int) -> None:
        """Test input, weight and bias gradients against central differences."""
        rng = np.random.default_rng(seed)
        stride = 1 + seed % 2
        x = rng.standard_normal((2, 2, 5, 5))
        weights = rng.standard_normal((3, 2, 3, 3))
        bias = rng.standard_normal(3)
        tape = LayerTape()
        out = conv2d(x, weights, bias, stride=stride, pad=1, tape=tape)
        upstream = rng.standard_normal(out.shape)
        grad_x, grad_w, grad_b = conv2d_backward(tape.pop(LayerKind.CONV), upstream)

        def via_x(v: np.ndarray) -> float:
            return float(np.sum(conv2d(v, weights, bias, stride, 1) * upstream))

        def via_w(v: np.ndarray) -> float:
            return float(np.sum(conv2d(x, v, bias, stride, 1) * upstream))

        def via_b(v: np.ndarray) -> float:
            return float(np.sum(conv2d(x, weights, v, stride, 1) * upstream))

        assert max_relative_error(grad_x, numerical_gradient(via_x, x)) < TOLERANCE
        numeric_w = numerical_gradient(via_w, weights)
        assert max_relative_error(grad_w, numeric_w) < TOLERANCE
        assert max_relative_error(grad_b, numerical_gradient(via_b, bias)) < TOLERANCE


class TestReLU:
    """Test the rectifier."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_matches_finite_differences(self, seed: int) -> None:
        """Test the masked pass-through away from the kink."""
        rng = np.random.default_rng(100 + seed)
        x = away_from_zero(rng, (3, 4, 4))
        upstream = rng.standard_normal(x.shape)
        tape = LayerTape()
        relu(x, tape=tape)
        analytic = relu_backward(tape.pop(LayerKind.RELU), upstream)

        numeric = numerical_gradient(lambda v: float(np.sum(relu(v) * upstream)), x)

        assert max_relative_error(analytic, numeric) < TOLERANCE

    def test_zero_input_gets_zero_gradient(self) -> None:
        """Test that exactly-zero inputs pass no gradient."""
        tape = LayerTape()
        relu(np.array([[0.0, 1.0]]), tape=tape)

        grad = relu_backward(tape.pop(LayerKind.RELU), np.ones((1, 2)))

        np.testing.assert_array_equal(grad, [[0.0, 1.0]])


class TestMaxPool2d:
    """Test non-overlapping max pooling."""

    def test_known_output(self) -> None:
        """Test pooling of a 4×4 ramp."""
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)

        np.testing.assert_array_equal(maxpool2d(x), [[[5, 7], [13, 15]]])

    def test_indivisible_extent(self) -> None:
        """Test that a 5×5 input cannot be pooled by 2."""
        with pytest.raises(ShapeError, match="not divisible"):
            maxpool2d(np.zeros((1, 5, 5)))

    def test_ties_route_to_first_maximum(self) -> None:
        """Test that equal values send the gradient to the first position."""
        tape = LayerTape()
        maxpool2d(np.ones((1, 2, 2)), tape=tape)

        grad = maxpool2d_backward(tape.pop(LayerKind.MAXPOOL), np.array([[[3.0]]]))

        np.testing.assert_array_equal(grad, [[[3.0, 0.0], [0.0, 0.0]]])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_mass_is_conserved(self, seed: int) -> None:
        """Test that each window passes its upstream value on unchanged."""
        rng = np.random.default_rng(300 + seed)
        x = rng.standard_normal((2, 3, 6, 6))
        upstream = rng.standard_normal((2, 3, 3, 3))
        tape = LayerTape()
        maxpool2d(x, tape=tape)

        grad = maxpool2d_backward(tape.pop(LayerKind.MAXPOOL), upstream)

        assert grad.sum() == pytest.approx(upstream.sum(), abs=1e-12)
        assert np.count_nonzero(grad) == np.count_nonzero(upstream)

    def test_zero_upstream(self) -> None:
        """Test that a zero grad_out yields a zero input gradient."""
        tape = LayerTape()
        maxpool2d(np.random.default_rng(2).standard_normal((1, 4, 4)), tape=tape)

        grad = maxpool2d_backward(tape.pop(LayerKind.MAXPOOL), np.zeros((1, 2, 2)))

        assert not np.any(grad)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_matches_finite_differences(self, seed: int) -> None:
        """Test routing with distinct values in every window."""
        rng = np.random.default_rng(200 + seed)
        x = rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) / 32.0
        upstream = rng.standard_normal((2, 2, 2, 2))
        tape = LayerTape()
        maxpool2d(x, tape=tape)
        analytic = maxpool2d_backward(tape.pop(LayerKind.MAXPOOL), upstream)

        numeric = numerical_gradient(
            lambda v: float(np.sum(maxpool2d(v) * upstream)), x
        )

        assert max_relative_error(analytic, numeric) < TOLERANCE


class TestLinear:
    """Test the affine layer."""

    def test_shape_mismatch(self) -> None:
        """Test that the input width must match the weights."""
        with pytest.raises(ShapeError):
            linear(np.zeros((2, 5)), np.zeros((3, 4)), np.zeros(3))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients_match_finite_differences(self, seed: int) -> None:
        """Test input, weight and bias gradients for batched input."""
        rng = np.random.default_rng(300 + seed)
        x = rng.standard_normal((3, 6))
        weights = rng.standard_normal((4, 6))
        bias = rng.standard_normal(4)
        upstream = rng.standard_normal((3, 4))
        tape = LayerTape()
        linear(x, weights, bias, tape=tape)
        grad_x, grad_w, grad_b = linear_backward(tape.pop(LayerKind.LINEAR), upstream)

        def via_x(v: np.ndarray) -> float:
            return float(np.sum(linear(v, weights, bias) * upstream))

        def via_w(v: np.ndarray) -> float:
            return float(np.sum(linear(x, v, bias) * upstream))

        def via_b(v: np.ndarray) -> float:
            return float(np.sum(linear(x, weights, v) * upstream))

        assert max_relative_error(grad_x, numerical_gradient(via_x, x)) < TOLERANCE
        numeric_w = numerical_gradient(via_w, weights)
        assert max_relative_error(grad_w, numeric_w) < TOLERANCE
        assert max_relative_error(grad_b, numerical_gradient(via_b, bias)) < TOLERANCE

    def test_vector_input(self) -> None:
        """Test that a 1-D input yields outer-product weight gradients."""
        tape = LayerTape()
        linear(np.array([1.0, 2.0]), np.eye(2), np.zeros(2), tape=tape)

        _, grad_w, grad_b = linear_backward(
            tape.pop(LayerKind.LINEAR), np.array([1.0, -1.0])
        )

        np.testing.assert_array_equal(grad_w, [[1.0, 2.0], [-1.0, -2.0]])
        np.testing.assert_array_equal(grad_b, [1.0, -1.0])


class TestFlattenAndResidual:
    """Test the reshaping and skip-connection ops."""

    def test_flatten_round_trip(self) -> None:
        """Test that the gradient is restored to the input shape."""
        tape = LayerTape()
        out = flatten(np.zeros((2, 3, 4, 4)), tape=tape)

        grad = flatten_backward(tape.pop(LayerKind.FLATTEN), np.ones_like(out))

        assert out.shape == (2, 48)
        assert grad.shape == (2, 3, 4, 4)

    def test_flatten_needs_batch_axis(self) -> None:
        """Test that a 1-D tensor cannot be flattened."""
        with pytest.raises(ShapeError):
            flatten(np.zeros(4))

    def test_residual_gradient_is_copied(self) -> None:
        """Test that both branches receive the upstream gradient."""
        tape = LayerTape()
        residual_add(np.ones((2, 2)), np.ones((2, 2)), tape=tape)
        upstream = np.array([[1.0, 2.0], [3.0, 4.0]])

        left, right = residual_add_backward(tape.pop(LayerKind.RESIDUAL_ADD), upstream)

        np.testing.assert_array_equal(left, upstream)
        np.testing.assert_array_equal(right, upstream)
        assert right is not left

    def test_residual_shape_mismatch(self) -> None:
        """Test that the branches must agree in shape."""
        with pytest.raises(ShapeError):
            residual_add(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSoftmaxCrossEntropy:
    """Test the loss head."""

    def test_softmax_of_large_logits(self) -> None:
        """Test that max-shifting keeps huge logits finite."""
        probs = softmax(np.array([1000.0, 1000.0]))

        np.testing.assert_allclose(probs, [0.5, 0.5])

    def test_uniform_logits(self) -> None:
        """Test the loss and gradient of equal logits."""
        loss, grad = softmax_cross_entropy(np.zeros(4), 1)

        assert loss == pytest.approx(np.log(4))
        np.testing.assert_allclose(grad, [0.25, -0.75, 0.25, 0.25])

    def test_batch_mean(self) -> None:
        """Test that a batch averages loss and scales the gradient."""
        logits = np.array([[0.0, 0.0], [0.0, 0.0]])

        loss, grad = softmax_cross_entropy(logits, np.array([0, 1]))

        assert loss == pytest.approx(np.log(2))
        np.testing.assert_allclose(grad, [[-0.25, 0.25], [0.25, -0.25]])

    def test_class_out_of_range(self) -> None:
        """Test that an invalid class index raises ValueError."""
        with pytest.raises(ValueError, match="out of range"):
            softmax_cross_entropy(np.zeros(3), 3)

    def test_label_count_mismatch(self) -> None:
        """Test that a batch needs one label per row."""
        with pytest.raises(ShapeError):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0]))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_matches_finite_differences(self, seed: int) -> None:
        """Test the logit gradient for random logits and classes."""
        rng = np.random.default_rng(400 + seed)
        logits = 3 * rng.standard_normal(10)
        label = int(rng.integers(10))
        _, analytic = softmax_cross_entropy(logits, label)

        numeric = numerical_gradient(
            lambda v: softmax_cross_entropy(v, label)[0], logits
        )

        assert max_relative_error(analytic, numeric) < TOLERANCE


class TestGradcheck:
    """Test the finite-difference helpers."""

    def test_quadratic(self) -> None:
        """Test central differences on a function with a known gradient."""
        x = np.array([1.0, -2.0, 0.5])

        numeric = numerical_gradient(lambda v: float(np.sum(v**2)), x)

        np.testing.assert_allclose(numeric, 2 * x, rtol=1e-8)

    def test_selected_indices(self) -> None:
        """Test that only requested entries are estimated."""
        numeric = numerical_gradient(
            lambda v: float(np.sum(v)), np.zeros(4), indices=np.array([1, 3])
        )

        np.testing.assert_allclose(numeric, [0.0, 1.0, 0.0, 1.0])

    def test_relative_error_shape_mismatch(self) -> None:
        """Test that differently shaped gradients are rejected."""
        with pytest.raises(ValueError):
            max_relative_error(np.zeros(2), np.zeros(3))
