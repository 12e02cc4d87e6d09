"""
The three desk-scale classifiers, their training loop and weight files.

=====================  =========  ============================================
Architecture           Role       Layout (3×32×32 input, 10 classes)
=====================  =========  ============================================
plain_large_kernel     AlexNet    conv5(16)-pool-conv5(32)-pool-fc(64)-fc(10)
stacked_small_kernel   VGG-16     conv3(16)×2-pool-conv3(32)×2-pool-fc(10)
residual_net           ResNet-50  conv3(16)-pool-res(16)-conv3(32)-pool-
                                  res(32)-pool-fc(10)
=====================  =========  ============================================
"""

import csv
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Callable

import numpy as np

from regional_adv.network import (
    Conv2d,
    Flatten,
    Layer,
    Linear,
    MaxPool2d,
    Network,
    Parameters,
    ReLU,
    ResidualBlock,
)
from regional_adv.tensor import Precision, Tensor

if TYPE_CHECKING:
    from regional_adv.data import LabelledDataset

logger = logging.getLogger(__name__)

INPUT_SHAPE = (3, 32, 32)
NUM_CLASSES = 10

WEIGHT_MAGIC = b"LPWT"
WEIGHT_FORMAT_VERSION = 1
_PRECISION_CODES = {Precision.STANDARD: 0, Precision.HIGH: 1}


class ArchitectureId(str, Enum):
    PLAIN_LARGE_KERNEL = "plain_large_kernel"
    STACKED_SMALL_KERNEL = "stacked_small_kernel"
    RESIDUAL_NET = "residual_net"


class WeightFileError(ValueError):
    """Raised when a weight file cannot be decoded."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


class Model(Network):
    """A :class:`Network` built for one of the zoo architectures."""

    def __init__(
        self,
        architecture: ArchitectureId,
        layers: list[Layer],
        precision: Precision = Precision.STANDARD,
    ) -> None:
        super().__init__(layers, INPUT_SHAPE, NUM_CLASSES, precision)
        self.architecture = ArchitectureId(architecture)

    def __repr__(self) -> str:
        return f"Model({self.architecture.value}, {self.precision.value})"


class ArchitectureFactory:
    """
    Registry mapping each architecture id to a function producing its layers.
    """

    def __init__(self) -> None:
        self._builders: dict[ArchitectureId, Callable[[], list[Layer]]] = {}

    def register(
        self, arch: ArchitectureId, builder_func: Callable[[], list[Layer]]
    ) -> None:
        self._builders[arch] = builder_func

    def create(self, arch: ArchitectureId) -> list[Layer]:
        if arch not in self._builders:
            raise ValueError(f"No builder registered for {arch}")
        return self._builders[arch]()

    def available_types(self) -> list[ArchitectureId]:
        return list(self._builders.keys())


factory = ArchitectureFactory()


def _plain_large_kernel_layers() -> list[Layer]:
    return [
        Conv2d("conv1", 3, 16, 5, pad=2),
        ReLU(),
        MaxPool2d(2),
        Conv2d("conv2", 16, 32, 5, pad=2),
        ReLU(),
        MaxPool2d(2),
        Flatten(),
        Linear("fc1", 32 * 8 * 8, 64),
        ReLU(),
        Linear("fc2", 64, NUM_CLASSES),
    ]


def _stacked_small_kernel_layers() -> list[Layer]:
    return [
        Conv2d("conv1", 3, 16, 3, pad=1),
        ReLU(),
        Conv2d("conv2", 16, 16, 3, pad=1),
        ReLU(),
        MaxPool2d(2),
        Conv2d("conv3", 16, 32, 3, pad=1),
        ReLU(),
        Conv2d("conv4", 32, 32, 3, pad=1),
        ReLU(),
        MaxPool2d(2),
        Flatten(),
        Linear("fc", 32 * 8 * 8, NUM_CLASSES),
    ]


def _residual_net_layers() -> list[Layer]:
    return [
        Conv2d("stem", 3, 16, 3, pad=1),
        ReLU(),
        MaxPool2d(2),
        ResidualBlock("block1", 16),
        Conv2d("widen", 16, 32, 3, pad=1),
        ReLU(),
        MaxPool2d(2),
        ResidualBlock("block2", 32),
        MaxPool2d(2),
        Flatten(),
        Linear("fc", 32 * 4 * 4, NUM_CLASSES),
    ]


factory.register(ArchitectureId.PLAIN_LARGE_KERNEL, _plain_large_kernel_layers)
factory.register(ArchitectureId.STACKED_SMALL_KERNEL, _stacked_small_kernel_layers)
factory.register(ArchitectureId.RESIDUAL_NET, _residual_net_layers)


def check_structure(model: Model) -> None:
    """
    Assert the structural traits that make the three architectures distinct.

    Raises:
        ValueError: If the layer list violates its architecture's traits.
    """
    layers = list(model.all_layers())
    kernels = [layer.kernel for layer in layers if isinstance(layer, Conv2d)]
    residuals = sum(isinstance(layer, ResidualBlock) for layer in layers)
    arch = model.architecture

    if arch is ArchitectureId.PLAIN_LARGE_KERNEL:
        ok = max(kernels, default=0) >= 5 and residuals == 0
    elif arch is ArchitectureId.STACKED_SMALL_KERNEL:
        ok = len(kernels) >= 4 and set(kernels) == {3} and residuals == 0
    else:
        ok = residuals >= 2
    if not ok:
        raise ValueError(
            f"{arch.value} layers violate its structure "
            f"(conv kernels {kernels}, residual connections {residuals})"
        )


def skeleton(
    arch: ArchitectureId | str, precision: Precision = Precision.STANDARD
) -> Model:
    """An architecture with its layer table but no parameters yet."""
    arch = ArchitectureId(arch)
    model = Model(arch, factory.create(arch), Precision(precision))
    check_structure(model)
    return model


def build(
    arch: ArchitectureId | str,
    seed: int,
    precision: Precision = Precision.STANDARD,
) -> Model:
    """
    Create a freshly initialised model, deterministic per (arch, seed).
    """
    model = skeleton(arch, precision)
    model.init_parameters(seed)
    return model


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    precision: Precision = Precision.STANDARD

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError(
                f"invalid learning_rate={self.learning_rate} or "
                f"momentum={self.momentum}"
            )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].test_accuracy if self.epochs else float("nan")


def predict(model: Network, x: Tensor) -> int | np.ndarray:
    """
    Predicted class: argmax of the logits, lowest index on ties.

    Returns an int for a single C×H×W input and an index array for a batch.
    """
    logits = model.forward(x)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=1)


def predict_dataset(
    model: Network, data: "LabelledDataset", batch_size: int = 256
) -> np.ndarray:
    predictions = [
        predict(model, data.images[start : start + batch_size])
        for start in range(0, len(data), batch_size)
    ]
    return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(model: Network, data: "LabelledDataset") -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict_dataset(model, data) == data.labels))


def train(
    model: Model,
    data: "LabelledDataset",
    cfg: TrainConfig,
    test_data: "LabelledDataset | None" = None,
) -> tuple[Model, TrainingLog]:
    """
    Minibatch SGD with momentum on softmax cross-entropy.

    The model is updated in place and returned with a per-epoch log of mean
    training loss and accuracy on ``test_data`` (or on ``data`` when no test
    set is given). Batch order is fully determined by ``cfg.seed``.

    Raises:
        ValueError: If the dataset is empty.
        TrainingDivergedError: If a batch loss is NaN or infinite.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")

    rng = np.random.default_rng(cfg.seed)
    images = np.ascontiguousarray(data.images, dtype=model.dtype)
    velocity: Parameters = {
        name: np.zeros_like(value) for name, value in model.parameters.items()
    }
    lr = model.dtype.type(cfg.learning_rate)
    momentum = model.dtype.type(cfg.momentum)
    log = TrainingLog()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        losses: list[float] = []
        for batch_index, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            loss, _, grads = model.loss_and_gradients(images[idx], data.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"{model.architecture.value}: loss became {loss} at epoch "
                    f"{epoch}, batch {batch_index}; lower the learning rate"
                )
            for name, grad in grads.items():
                velocity[name] *= momentum
                velocity[name] += grad
                model.parameters[name] -= lr * velocity[name]
            losses.append(loss)

        held_out = test_data if test_data is not None else data
        accuracy = evaluate_accuracy(model, held_out)
        record = EpochRecord(epoch, float(np.mean(losses)), accuracy)
        log.epochs.append(record)
        logger.info(
            "%s epoch %d: train_loss=%.4f test_accuracy=%.4f",
            model.architecture.value,
            epoch,
            record.train_loss,
            record.test_accuracy,
        )
    return model, log


def write_training_log(log: TrainingLog, path: Path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "test_accuracy"])
        for record in log.epochs:
            writer.writerow(
                [record.epoch, repr(record.train_loss), repr(record.test_accuracy)]
            )


def save(model: Model, path: Path) -> None:
    """
    Write a weight file.

    Layout (little-endian): magic ``LPWT``, uint16 format version, uint8
    architecture-name length and name, uint8 precision code, uint32 parameter
    count, then per parameter: uint16 name length, name, uint8 rank, uint32
    extents, raw values.
    """
    arch = model.architecture.value.encode("utf-8")
    chunks = [
        WEIGHT_MAGIC,
        struct.pack("<HB", WEIGHT_FORMAT_VERSION, len(arch)),
        arch,
        struct.pack("<BI", _PRECISION_CODES[model.precision], len(model.parameters)),
    ]
    value_dtype = model.dtype.newbyteorder("<")
    for name, value in model.parameters.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        chunks.append(value.astype(value_dtype).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, payload: bytes) -> None:
        self.payload = payload
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.payload):
            raise WeightFileError(f"file truncated while reading {what}")
        chunk = self.payload[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load(path: Path) -> Model:
    """
    Read a weight file written by :func:`save`.

    Raises:
        WeightFileError: On bad magic, unsupported version, unknown
            architecture, truncation or a shape table that does not match
            the architecture.
    """
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4, "magic") != WEIGHT_MAGIC:
        raise WeightFileError("bad magic")
    version, arch_length = reader.unpack("<HB", "header")
    if version != WEIGHT_FORMAT_VERSION:
        raise WeightFileError(f"unsupported format version {version}")
    arch_name = reader.take(arch_length, "architecture id").decode("utf-8")
    try:
        arch = ArchitectureId(arch_name)
    except ValueError as e:
        raise WeightFileError(f"unknown architecture {arch_name!r}") from e
    precision_code, count = reader.unpack("<BI", "header")
    precisions = {code: p for p, code in _PRECISION_CODES.items()}
    if precision_code not in precisions:
        raise WeightFileError(f"unknown precision code {precision_code}")

    model = skeleton(arch, precisions[precision_code])
    expected = model.parameter_shapes()
    if count != len(expected):
        raise WeightFileError(
            f"shape-table mismatch: {count} parameters stored, "
            f"{arch.value} has {len(expected)}"
        )

    value_dtype = model.dtype.newbyteorder("<")
    parameters: Parameters = {}
    for expected_name, expected_shape in expected.items():
        (name_length,) = reader.unpack("<H", f"parameter {expected_name}")
        name = reader.take(name_length, f"parameter {expected_name}").decode("utf-8")
        (rank,) = reader.unpack("<B", f"parameter {name}")
        shape = reader.unpack(f"<{rank}I", f"parameter {name}")
        if name != expected_name or tuple(shape) != expected_shape:
            raise WeightFileError(
                f"shape-table mismatch: found {name}{tuple(shape)}, "
                f"expected {expected_name}{expected_shape}"
            )
        size = int(np.prod(shape)) * value_dtype.itemsize
        raw = reader.take(size, f"parameter {name}")
        parameters[name] = (
            np.frombuffer(raw, dtype=value_dtype).astype(model.dtype).reshape(shape)
        )
    if reader.offset != len(reader.payload):
        raise WeightFileError(
            f"{len(reader.payload) - reader.offset} trailing bytes after last parameter"
        )
    model.set_parameters(parameters)
    return model
