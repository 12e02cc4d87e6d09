"""Tests for layers and the sequential network."""

import numpy as np
import pytest

from regional_adv.gradcheck import max_relative_error, numerical_gradient
from regional_adv.network import (
    Conv2d,
    Flatten,
    Linear,
    MaxPool2d,
    Network,
    ResidualBlock,
    input_gradient,
)
from regional_adv.tensor import (
    LayerKind,
    LayerTape,
    Precision,
    ShapeError,
    softmax_cross_entropy,
)

TOLERANCE = 1e-5


def residual_network(seed: int) -> Network:
    network = Network(
        [
            Conv2d("stem", 2, 3, 3, pad=1),
            ResidualBlock("block", 3),
            Flatten(),
            Linear("fc", 3 * 4 * 4, 3),
        ],
        input_shape=(2, 4, 4),
        num_classes=3,
        precision=Precision.HIGH,
    )
    network.init_parameters(seed)
    return network


class TestNetworkParameters:
    """Test parameter bookkeeping."""

    def test_parameter_table(self, tiny_network: Network) -> None:
        """Test that names and shapes follow the layer order."""
        assert tiny_network.parameter_shapes() == {
            "conv.weight": (3, 2, 3, 3),
            "conv.bias": (3,),
            "fc.weight": (4, 27),
            "fc.bias": (4,),
        }

    def test_residual_parameters_are_nested(self) -> None:
        """Test that a residual block exposes both of its convolutions."""
        names = list(residual_network(0).parameters)

        assert names == [
            "stem.weight",
            "stem.bias",
            "block.conv_a.weight",
            "block.conv_a.bias",
            "block.conv_b.weight",
            "block.conv_b.bias",
            "fc.weight",
            "fc.bias",
        ]

    def test_init_is_deterministic(self) -> None:
        """Test that one seed always yields the same weights."""
        first, second = residual_network(4), residual_network(4)

        for name, value in first.parameters.items():
            np.testing.assert_array_equal(value, second.parameters[name])

    def test_init_bounds(self, tiny_network: Network) -> None:
        """Test fan-in scaled bounds and zero biases."""
        bound = np.sqrt(6.0 / 18)

        assert np.abs(tiny_network.parameters["conv.weight"]).max() <= bound
        assert not tiny_network.parameters["fc.bias"].any()

    def test_set_parameters_wrong_shape(self, tiny_network: Network) -> None:
        """Test that a misshapen parameter is rejected."""
        parameters = dict(tiny_network.parameters)
        parameters["fc.bias"] = np.zeros(5)

        with pytest.raises(ShapeError, match="fc.bias"):
            tiny_network.set_parameters(parameters)

    def test_set_parameters_missing_name(self, tiny_network: Network) -> None:
        """Test that a missing parameter is rejected."""
        parameters = dict(tiny_network.parameters)
        del parameters["conv.bias"]

        with pytest.raises(ShapeError):
            tiny_network.set_parameters(parameters)

    def test_standard_precision_stores_float32(self) -> None:
        """Test that parameters take the precision's dtype."""
        network = Network([Flatten(), Linear("fc", 4, 2)], (1, 2, 2), 2)
        network.init_parameters(0)

        assert network.parameters["fc.weight"].dtype == np.float32


class TestNetworkForward:
    """Test forward evaluation."""

    def test_single_and_batch_agree(self, tiny_network: Network) -> None:
        """Test that a batch row equals the single-sample result."""
        x = np.random.default_rng(0).uniform(size=(3, 2, 6, 6))

        batch = tiny_network.forward(x)
        single = tiny_network.forward(x[1])

        assert batch.shape == (3, 4)
        assert single.shape == (4,)
        np.testing.assert_allclose(batch[1], single)

    def test_wrong_input_shape(self, tiny_network: Network) -> None:
        """Test that inputs must match the declared shape."""
        with pytest.raises(ShapeError, match="does not match model input"):
            tiny_network.forward(np.zeros((2, 5, 5)))

    def test_forward_does_not_modify_input(self, tiny_network: Network) -> None:
        """Test that evaluation leaves the input untouched."""
        x = np.full((2, 6, 6), 0.5)
        tiny_network.forward(x)

        assert np.all(x == 0.5)

    def test_logit_count_checked(self) -> None:
        """Test that a network must emit num_classes logits."""
        network = Network([Flatten(), Linear("fc", 4, 3)], (1, 2, 2), 2)
        network.init_parameters(0)

        with pytest.raises(ShapeError, match="logits"):
            network.forward(np.zeros((1, 2, 2)))


class TestNetworkBackward:
    """Test gradients through the whole network."""

    @pytest.mark.parametrize("seed", range(10))
    def test_input_gradient_matches_finite_differences(
        self, tiny_network: Network, seed: int
    ) -> None:
        """Test ∇ₓJ of the conv-pool-linear network."""
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(2, 6, 6))
        label = int(rng.integers(4))

        analytic = input_gradient(tiny_network, x, label)
        numeric = numerical_gradient(
            lambda v: softmax_cross_entropy(tiny_network.forward(v), label)[0], x
        )

        assert max_relative_error(analytic, numeric) < TOLERANCE

    @pytest.mark.parametrize("seed", range(10))
    def test_residual_gradient_matches_finite_differences(self, seed: int) -> None:
        """Test ∇ₓJ through a skip connection."""
        network = residual_network(seed)
        rng = np.random.default_rng(50 + seed)
        x = rng.uniform(size=(2, 4, 4))

        analytic = input_gradient(network, x, 1)
        numeric = numerical_gradient(
            lambda v: softmax_cross_entropy(network.forward(v), 1)[0], x
        )

        assert max_relative_error(analytic, numeric) < TOLERANCE

    def test_parameter_gradient(self, tiny_network: Network) -> None:
        """Test a weight gradient against central differences."""
        rng = np.random.default_rng(3)
        x = rng.uniform(size=(2, 2, 6, 6))
        labels = np.array([0, 3])
        _, _, grads = tiny_network.loss_and_gradients(x, labels)
        weights = tiny_network.parameters["fc.weight"]

        def loss_at(v: np.ndarray) -> float:
            tiny_network.parameters["fc.weight"] = v
            return softmax_cross_entropy(tiny_network.forward(x), labels)[0]

        numeric = numerical_gradient(loss_at, weights)
        tiny_network.parameters["fc.weight"] = weights

        assert max_relative_error(grads["fc.weight"], numeric) < TOLERANCE

    def test_gradient_leaves_parameters_unchanged(self, tiny_network: Network) -> None:
        """Test that computing ∇ₓJ does not touch θ."""
        before = {k: v.copy() for k, v in tiny_network.parameters.items()}

        input_gradient(tiny_network, np.full((2, 6, 6), 0.3), 2)

        for name, value in tiny_network.parameters.items():
            np.testing.assert_array_equal(value, before[name])

    def test_tape_must_be_consumed(self, tiny_network: Network) -> None:
        """Test that leftover tape entries are reported."""
        tape = LayerTape()
        tape.record(LayerKind.RELU, active=None)
        logits = tiny_network.forward(np.zeros((2, 6, 6)), tape)

        with pytest.raises(ShapeError, match="unconsumed"):
            tiny_network.backward(tape, np.ones_like(logits))

    def test_single_input_required(self, tiny_network: Network) -> None:
        """Test that logits_and_input_gradient refuses a batch."""
        with pytest.raises(ShapeError):
            tiny_network.logits_and_input_gradient(np.zeros((2, 2, 6, 6)), 0)

    def test_maxpool_layer_object(self) -> None:
        """Test that the pooling layer honours its window size."""
        out = MaxPool2d(3).forward({}, np.arange(9.0).reshape(1, 1, 3, 3), None)

        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 8.0
