"""
Dense tensor kernels with explicit forward and backward passes.

Tensors are plain numpy arrays in channel-first layout. Every spatial op
accepts either a single sample (C, H, W) or a batch (N, C, H, W) and returns
the same rank it was given. Forward ops optionally record what their backward
pass needs on a :class:`LayerTape`; backward ops consume one
:class:`TapeEntry` each.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

Tensor = np.ndarray


class Precision(str, Enum):
    """Numeric precision mode of a model and of the tensors flowing through it."""

    HIGH = "high"
    STANDARD = "standard"

    @property
    def dtype(self) -> np.dtype:
        if self is Precision.HIGH:
            return np.dtype(np.float64)
        return np.dtype(np.float32)


class ShapeError(ValueError):
    """Raised when tensor shapes (or a tape) do not satisfy an op's contract."""


class LayerKind(str, Enum):
    CONV = "conv"
    RELU = "relu"
    MAXPOOL = "maxpool"
    LINEAR = "linear"
    FLATTEN = "flatten"
    RESIDUAL_ADD = "residual_add"
    SOFTMAX_CROSS_ENTROPY = "softmax_cross_entropy"


@dataclass
class TapeEntry:
    kind: LayerKind
    cache: dict[str, Any]


@dataclass
class LayerTape:
    """
    Ordered record of forward ops. Backward replays it last-in, first-out.
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def record(self, kind: LayerKind, **cache: Any) -> TapeEntry:
        entry = TapeEntry(kind=kind, cache=cache)
        self.entries.append(entry)
        return entry

    def pop(self, kind: LayerKind) -> TapeEntry:
        """
        Remove and return the most recent entry, checking its kind.

        Raises:
            ShapeError: If the tape is empty or the entry is of another kind.
        """
        if not self.entries:
            raise ShapeError(f"tape is empty, expected a {kind.value} entry")
        entry = self.entries.pop()
        if entry.kind is not kind:
            raise ShapeError(
                f"tape out of order: expected {kind.value}, found {entry.kind.value}"
            )
        return entry

    def __len__(self) -> int:
        return len(self.entries)


def _batched(x: Tensor, what: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x[np.newaxis], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{what}: expected C×H×W or N×C×H×W, got shape {x.shape}")


def _check_kind(entry: TapeEntry, kind: LayerKind) -> None:
    if entry.kind is not kind:
        raise ShapeError(
            f"{kind.value} backward given a {entry.kind.value} tape entry"
        )


def _check_grad_shape(grad: Tensor, expected: tuple[int, ...], what: str) -> None:
    if grad.shape != expected:
        raise ShapeError(
            f"{what}: gradient shape {grad.shape} does not match "
            f"recorded output shape {expected}"
        )


def conv2d(
    x: Tensor,
    weights: Tensor,
    bias: Tensor,
    stride: int = 1,
    pad: int = 0,
    tape: LayerTape | None = None,
) -> Tensor:
    """
    2-D cross-correlation (no kernel flip) with zero padding.

    Args:
        x: Input of shape C×H×W or N×C×H×W.
        weights: Kernels of shape K×C×kH×kW.
        bias: Per-output-channel bias of shape K.
        stride: Step between windows, at least 1.
        pad: Zero padding added to every spatial border.
        tape: If given, the op is recorded for :func:`conv2d_backward`.

    Returns:
        Output of shape K×H′×W′ (or N×K×H′×W′) with
        H′ = floor((H + 2·pad − kH) / stride) + 1.

    Raises:
        ShapeError: On any inconsistency between input, weights and bias.
    """
    xb, single = _batched(x, "conv2d input")
    if weights.ndim != 4:
        raise ShapeError(f"conv2d: weights must be K×C×kH×kW, got {weights.shape}")
    n, c, h, w = xb.shape
    k, wc, kh, kw = weights.shape
    if wc != c:
        raise ShapeError(
            f"conv2d: input {xb.shape[1:]} has {c} channels but weights "
            f"{weights.shape} expect {wc}"
        )
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match K={k}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or pad={pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(
            f"conv2d: kernel {kh}×{kw} larger than padded input "
            f"{h + 2 * pad}×{w + 2 * pad}"
        )

    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ weights.reshape(k, -1).T + bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))

    if tape is not None:
        tape.record(
            LayerKind.CONV,
            cols=cols,
            weights=weights,
            input_shape=xb.shape,
            output_shape=out.shape,
            stride=stride,
            pad=pad,
            single=single,
        )
    return out[0] if single else out


def conv2d_backward(
    entry: TapeEntry, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """
    Gradients of :func:`conv2d` with respect to input, weights and bias.

    Returns:
        Tuple of (grad_input, grad_weights, grad_bias).
    """
    _check_kind(entry, LayerKind.CONV)
    cache = entry.cache
    gb, _ = _batched(grad_out, "conv2d_backward grad_out")
    _check_grad_shape(gb, cache["output_shape"], "conv2d_backward")

    weights: Tensor = cache["weights"]
    cols: Tensor = cache["cols"]
    stride: int = cache["stride"]
    pad: int = cache["pad"]
    n, c, h, w = cache["input_shape"]
    k, _, kh, kw = weights.shape
    ho, wo = gb.shape[2], gb.shape[3]

    g = gb.transpose(0, 2, 3, 1).reshape(-1, k)
    grad_weights = (g.T @ cols).reshape(weights.shape)
    grad_bias = g.sum(axis=0)

    grad_cols = (g @ weights.reshape(k, -1)).reshape(n, ho, wo, c, kh, kw)
    grad_padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gb.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_padded[
                :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
            ] += grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_input = grad_padded[:, :, pad : pad + h, pad : pad + w]
    if cache["single"]:
        grad_input = grad_input[0]
    return np.ascontiguousarray(grad_input), grad_weights, grad_bias


def relu(x: Tensor, tape: LayerTape | None = None) -> Tensor:
    out = np.maximum(x, 0)
    if tape is not None:
        tape.record(LayerKind.RELU, active=x > 0)
    return out


def relu_backward(entry: TapeEntry, grad_out: Tensor) -> Tensor:
    _check_kind(entry, LayerKind.RELU)
    active: Tensor = entry.cache["active"]
    _check_grad_shape(grad_out, active.shape, "relu_backward")
    return grad_out * active


def maxpool2d(x: Tensor, size: int = 2, tape: LayerTape | None = None) -> Tensor:
    """
    Non-overlapping max pooling with a size×size window and stride size.

    Ties resolve to the first maximum in row-major window order, which is
    where :func:`maxpool2d_backward` routes the gradient.
    """
    xb, single = _batched(x, "maxpool2d input")
    n, c, h, w = xb.shape
    if size < 1 or h % size or w % size:
        raise ShapeError(
            f"maxpool2d: spatial extent {h}×{w} not divisible by window {size}"
        )
    ho, wo = h // size, w // size
    windows = (
        xb.reshape(n, c, ho, size, wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, size * size)
    )
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., np.newaxis], axis=-1)[..., 0]
    if tape is not None:
        tape.record(
            LayerKind.MAXPOOL,
            argmax=argmax,
            input_shape=xb.shape,
            size=size,
            single=single,
        )
    return out[0] if single else out


def maxpool2d_backward(entry: TapeEntry, grad_out: Tensor) -> Tensor:
    _check_kind(entry, LayerKind.MAXPOOL)
    cache = entry.cache
    argmax: Tensor = cache["argmax"]
    size: int = cache["size"]
    n, c, h, w = cache["input_shape"]
    gb, _ = _batched(grad_out, "maxpool2d_backward grad_out")
    _check_grad_shape(gb, argmax.shape, "maxpool2d_backward")

    ho, wo = h // size, w // size
    routed = np.zeros((n, c, ho, wo, size * size), dtype=gb.dtype)
    np.put_along_axis(routed, argmax[..., np.newaxis], gb[..., np.newaxis], axis=-1)
    grad_input = (
        routed.reshape(n, c, ho, wo, size, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )
    return grad_input[0] if cache["single"] else grad_input


def linear(
    x: Tensor, weights: Tensor, bias: Tensor, tape: LayerTape | None = None
) -> Tensor:
    """
    Affine map ``x @ weights.T + bias`` for x of shape D or N×D and
    weights of shape out×D.
    """
    if x.ndim not in (1, 2) or weights.ndim != 2:
        raise ShapeError(
            f"linear: expected D or N×D input and out×D weights, "
            f"got {x.shape} and {weights.shape}"
        )
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(
            f"linear: input width {x.shape[-1]} does not match weights {weights.shape}"
        )
    if bias.shape != (weights.shape[0],):
        raise ShapeError(
            f"linear: bias shape {bias.shape} does not match weights {weights.shape}"
        )
    out = x @ weights.T + bias
    if tape is not None:
        tape.record(LayerKind.LINEAR, x=x, weights=weights, output_shape=out.shape)
    return out


def linear_backward(
    entry: TapeEntry, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    _check_kind(entry, LayerKind.LINEAR)
    x: Tensor = entry.cache["x"]
    weights: Tensor = entry.cache["weights"]
    _check_grad_shape(grad_out, entry.cache["output_shape"], "linear_backward")
    if x.ndim == 1:
        return grad_out @ weights, np.outer(grad_out, x), grad_out.copy()
    return grad_out @ weights, grad_out.T @ x, grad_out.sum(axis=0)


def flatten(x: Tensor, tape: LayerTape | None = None) -> Tensor:
    """Collapse every axis after the batch axis."""
    if x.ndim < 2:
        raise ShapeError(f"flatten: expected a batched tensor, got shape {x.shape}")
    if tape is not None:
        tape.record(LayerKind.FLATTEN, input_shape=x.shape)
    return x.reshape(x.shape[0], -1)


def flatten_backward(entry: TapeEntry, grad_out: Tensor) -> Tensor:
    _check_kind(entry, LayerKind.FLATTEN)
    shape: tuple[int, ...] = entry.cache["input_shape"]
    if grad_out.size != int(np.prod(shape)):
        raise ShapeError(
            f"flatten_backward: gradient shape {grad_out.shape} cannot be "
            f"restored to {shape}"
        )
    return grad_out.reshape(shape)


def residual_add(a: Tensor, b: Tensor, tape: LayerTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"residual_add: shapes {a.shape} and {b.shape} differ")
    if tape is not None:
        tape.record(LayerKind.RESIDUAL_ADD, shape=a.shape)
    return a + b


def residual_add_backward(entry: TapeEntry, grad_out: Tensor) -> tuple[Tensor, Tensor]:
    _check_kind(entry, LayerKind.RESIDUAL_ADD)
    _check_grad_shape(grad_out, entry.cache["shape"], "residual_add_backward")
    return grad_out, grad_out.copy()


def softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor,
    class_index: int | Tensor,
    tape: LayerTape | None = None,
) -> tuple[float, Tensor]:
    """
    Cross-entropy of softmax(logits) against a class, via max-shifted
    log-sum-exp.

    For a logit vector of length K and an integer class the loss is
    ``logsumexp(logits) - logits[class_index]`` and the gradient
    ``softmax(logits) - onehot(class_index)``. For a batch N×K with N labels
    the loss and gradient are averaged over the batch.

    Raises:
        ValueError: If a class index is out of range.
        ShapeError: If logits are not 1-D or 2-D, or labels do not match.
    """
    if logits.ndim == 1:
        labels = np.asarray([class_index])
        batch = logits[np.newaxis]
    elif logits.ndim == 2:
        labels = np.asarray(class_index).reshape(-1)
        batch = logits
        if labels.shape[0] != batch.shape[0]:
            raise ShapeError(
                f"softmax_cross_entropy: {labels.shape[0]} labels for "
                f"{batch.shape[0]} logit rows"
            )
    else:
        raise ShapeError(f"softmax_cross_entropy: logits shape {logits.shape}")

    num_classes = batch.shape[1]
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(
            f"class index out of range [0, {num_classes}): {labels.tolist()}"
        )

    rows = np.arange(batch.shape[0])
    peak = batch.max(axis=1, keepdims=True)
    shifted = batch - peak
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    losses = np.log(total[:, 0]) - shifted[rows, labels]
    grad = exp / total
    grad[rows, labels] -= 1

    if logits.ndim == 1:
        loss, grad_logits = float(losses[0]), grad[0]
    else:
        loss, grad_logits = float(losses.mean()), grad / batch.shape[0]

    if tape is not None:
        tape.record(LayerKind.SOFTMAX_CROSS_ENTROPY, grad=grad_logits)
    return loss, grad_logits


def softmax_cross_entropy_backward(entry: TapeEntry, grad_loss: float = 1.0) -> Tensor:
    _check_kind(entry, LayerKind.SOFTMAX_CROSS_ENTROPY)
    return entry.cache["grad"] * grad_loss
