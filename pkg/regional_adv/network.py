"""
Layer objects and the fixed-sequence network that strings them together.

A :class:`Network` owns an ordered parameter dictionary and a list of layers.
Its forward pass records each op on a :class:`LayerTape`; its backward pass
walks the layers in reverse, popping exactly the entries the forward pass
pushed.
"""

import logging
from abc import ABC, abstractmethod
from typing import Iterator

import numpy as np

from regional_adv.tensor import (
    LayerKind,
    LayerTape,
    Precision,
    ShapeError,
    Tensor,
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
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

Parameters = dict[str, Tensor]


class Layer(ABC):
    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def fan_in(self) -> int:
        return 0

    def sublayers(self) -> Iterator["Layer"]:
        yield self

    @abstractmethod
    def forward(self, params: Parameters, x: Tensor, tape: LayerTape | None) -> Tensor:
        ...

    @abstractmethod
    def backward(
        self, params: Parameters, tape: LayerTape, grad: Tensor, grads: Parameters
    ) -> Tensor:
        ...


class Conv2d(Layer):
    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        pad: int = 0,
    ) -> None:
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            f"{self.name}.weight": (
                self.out_channels,
                self.in_channels,
                self.kernel,
                self.kernel,
            ),
            f"{self.name}.bias": (self.out_channels,),
        }

    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def forward(self, params: Parameters, x: Tensor, tape: LayerTape | None) -> Tensor:
        return conv2d(
            x,
            params[f"{self.name}.weight"],
            params[f"{self.name}.bias"],
            stride=self.stride,
            pad=self.pad,
            tape=tape,
        )

    def backward(
        self, params: Parameters, tape: LayerTape, grad: Tensor, grads: Parameters
    ) -> Tensor:
        grad_input, grad_weights, grad_bias = conv2d_backward(
            tape.pop(LayerKind.CONV), grad
        )
        grads[f"{self.name}.weight"] = grad_weights
        grads[f"{self.name}.bias"] = grad_bias
        return grad_input


class ReLU(Layer):
    def forward(self, params: Parameters, x: Tensor, tape: LayerTape | None) -> Tensor:
        return relu(x, tape=tape)

    def backward(
        self, params: Parameters, tape: LayerTape, grad: Tensor, grads: Parameters
    ) -> Tensor:
        return relu_backward(tape.pop(LayerKind.RELU), grad)


class MaxPool2d(Layer):
    def __init__(self, size: int = 2) -> None:
        self.size = size

    def forward(self, params: Parameters, x: Tensor, tape: LayerTape | None) -> Tensor:
        return maxpool2d(x, size=self.size, tape=tape)

    def backward(
        self, params: Parameters, tape: LayerTape, grad: Tensor, grads: Parameters
    ) -> Tensor:
        return maxpool2d_backward(tape.pop(LayerKind.MAXPOOL), grad)


class Flatten(Layer):
    def forward(self, params: Parameters, x: Tensor, tape: LayerTape | None) -> Tensor:
        return flatten(x, tape=tape)

    def backward(
        self, params: Parameters, tape: LayerTape, grad: Tensor, grads: Parameters
    ) -> Tensor:
        return flatten_backward(tape.pop(LayerKind.FLATTEN), grad)


class Linear(Layer):
    def __init__(self, name: str, in_features: int, out_features: int) -> None:
        self.name = name
        self.in_features = in_features
        self.out_features = out_features

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            f"{self.name}.weight": (self.out_features, self.in_features),
            f"{self.name}.bias": (self.out_features,),
        }

    def fan_in(self) -> int:
        return self.in_features

    def forward(self, params: Parameters, x: Tensor, tape: LayerTape | None) -> Tensor:
        return linear(
            x, params[f"{self.name}.weight"], params[f"{self.name}.bias"], tape=tape
        )

    def backward(
        self, params: Parameters, tape: LayerTape, grad: Tensor, grads: Parameters
    ) -> Tensor:
        grad_input, grad_weights, grad_bias = linear_backward(
            tape.pop(LayerKind.LINEAR), grad
        )
        grads[f"{self.name}.weight"] = grad_weights
        grads[f"{self.name}.bias"] = grad_bias
        return grad_input


class ResidualBlock(Layer):
    """
    ``relu(conv_b(relu(conv_a(x))) + x)`` with 3×3 same-size convolutions and
    an identity skip connection.
    """

    def __init__(self, name: str, channels: int) -> None:
        self.name = name
        self.conv_a = Conv2d(f"{name}.conv_a", channels, channels, 3, pad=1)
        self.relu_a = ReLU()
        self.conv_b = Conv2d(f"{name}.conv_b", channels, channels, 3, pad=1)
        self.relu_out = ReLU()

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return {**self.conv_a.parameter_shapes(), **self.conv_b.parameter_shapes()}

    def sublayers(self) -> Iterator[Layer]:
        yield self
        yield from (self.conv_a, self.relu_a, self.conv_b, self.relu_out)

    def forward(self, params: Parameters, x: Tensor, tape: LayerTape | None) -> Tensor:
        h = self.conv_a.forward(params, x, tape)
        h = self.relu_a.forward(params, h, tape)
        h = self.conv_b.forward(params, h, tape)
        h = residual_add(h, x, tape=tape)
        return self.relu_out.forward(params, h, tape)

    def backward(
        self, params: Parameters, tape: LayerTape, grad: Tensor, grads: Parameters
    ) -> Tensor:
        grad = self.relu_out.backward(params, tape, grad, grads)
        grad_main, grad_skip = residual_add_backward(
            tape.pop(LayerKind.RESIDUAL_ADD), grad
        )
        grad_main = self.conv_b.backward(params, tape, grad_main, grads)
        grad_main = self.relu_a.backward(params, tape, grad_main, grads)
        grad_main = self.conv_a.backward(params, tape, grad_main, grads)
        return grad_main + grad_skip


class Network:
    """
    A fixed sequence of layers with its parameters θ.

    The network maps C×H×W inputs (or N×C×H×W batches) to ``num_classes``
    logits. Parameters are stored in the dtype of ``precision``.
    """

    def __init__(
        self,
        layers: list[Layer],
        input_shape: tuple[int, int, int],
        num_classes: int,
        precision: Precision = Precision.STANDARD,
        parameters: Parameters | None = None,
    ) -> None:
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.precision = Precision(precision)
        self.parameters: Parameters = {}
        if parameters is not None:
            self.set_parameters(parameters)

    @property
    def dtype(self) -> np.dtype:
        return self.precision.dtype

    def all_layers(self) -> Iterator[Layer]:
        for layer in self.layers:
            yield from layer.sublayers()

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            shapes.update(layer.parameter_shapes())
        return shapes

    def set_parameters(self, parameters: Parameters) -> None:
        """
        Replace θ, checking names and shapes against the layer table.

        Raises:
            ShapeError: If a parameter is missing, unexpected or misshapen.
        """
        expected = self.parameter_shapes()
        if list(parameters) != list(expected):
            raise ShapeError(
                f"parameter names {list(parameters)} do not match {list(expected)}"
            )
        for name, shape in expected.items():
            if parameters[name].shape != shape:
                raise ShapeError(
                    f"parameter {name} has shape {parameters[name].shape}, "
                    f"expected {shape}"
                )
        self.parameters = {
            name: np.ascontiguousarray(value, dtype=self.dtype)
            for name, value in parameters.items()
        }

    def init_parameters(self, seed: int) -> None:
        """
        Fan-in scaled uniform initialisation: weights ~ U(-b, b) with
        b = sqrt(6 / fan_in), biases zero. Deterministic per seed.
        """
        rng = np.random.default_rng(seed)
        parameters: Parameters = {}
        for layer in self.all_layers():
            # containers report their children's shapes but own no weights
            if layer.fan_in() == 0:
                continue
            for name, shape in layer.parameter_shapes().items():
                if name.endswith(".bias"):
                    parameters[name] = np.zeros(shape, dtype=self.dtype)
                else:
                    bound = np.sqrt(6.0 / layer.fan_in())
                    parameters[name] = rng.uniform(-bound, bound, size=shape).astype(
                        self.dtype
                    )
        self.set_parameters(
            {name: parameters[name] for name in self.parameter_shapes()}
        )

    def prepare_input(self, x: Tensor) -> Tensor:
        """
        Cast x to the model dtype and check it against the input contract.

        Raises:
            ShapeError: If x is neither C×H×W nor N×C×H×W with the model's C, H, W.
        """
        x = np.asarray(x)
        if x.shape[-3:] != self.input_shape or x.ndim not in (3, 4):
            raise ShapeError(
                f"input shape {x.shape} does not match model input {self.input_shape}"
            )
        return np.ascontiguousarray(x, dtype=self.dtype)

    def forward(self, x: Tensor, tape: LayerTape | None = None) -> Tensor:
        x = self.prepare_input(x)
        single = x.ndim == 3
        h = x[np.newaxis] if single else x
        for layer in self.layers:
            h = layer.forward(self.parameters, h, tape)
        if h.shape[-1] != self.num_classes:
            raise ShapeError(
                f"network emitted {h.shape[-1]} logits, expected {self.num_classes}"
            )
        return h[0] if single else h

    def backward(
        self, tape: LayerTape, grad_logits: Tensor
    ) -> tuple[Tensor, Parameters]:
        """
        Backpropagate logit gradients through the recorded tape.

        Returns:
            Tuple of (gradient with respect to the batched input, parameter
            gradients keyed like ``parameters``).

        Raises:
            ShapeError: If the tape is not consumed exactly.
        """
        grad = grad_logits[np.newaxis] if grad_logits.ndim == 1 else grad_logits
        grads: Parameters = {}
        for layer in reversed(self.layers):
            grad = layer.backward(self.parameters, tape, grad, grads)
        if len(tape):
            raise ShapeError(
                f"tape holds {len(tape)} unconsumed entries after backward"
            )
        return grad, {name: grads[name] for name in self.parameters}

    def loss_and_gradients(
        self, x: Tensor, labels: Tensor | int
    ) -> tuple[float, Tensor, Parameters]:
        """
        Mean cross-entropy of a batch plus its input and parameter gradients.
        """
        tape = LayerTape()
        logits = self.forward(x, tape)
        loss, grad_logits = softmax_cross_entropy(logits, labels)
        grad_input, grads = self.backward(tape, grad_logits)
        return loss, grad_input, grads

    def logits_and_input_gradient(
        self, x: Tensor, class_index: int
    ) -> tuple[Tensor, float, Tensor]:
        """
        Logits at a single input plus the loss J(g(θ, x)_c) and ∇ₓJ.
        """
        x = self.prepare_input(x)
        if x.ndim != 3:
            raise ShapeError(f"expected a single C×H×W input, got shape {x.shape}")
        tape = LayerTape()
        logits = self.forward(x, tape)
        loss, grad_logits = softmax_cross_entropy(logits, class_index)
        grad_input, _ = self.backward(tape, grad_logits)
        return logits, loss, grad_input[0]


def input_gradient(model: Network, x: Tensor, class_index: int) -> Tensor:
    """
    Gradient of the cross-entropy loss for ``class_index`` with respect to a
    single input x. Model parameters are left untouched.
    """
    _, _, grad = model.logits_and_input_gradient(x, class_index)
    return grad
