"""
Iterative sign-gradient attack, optionally restricted by a localization mask.

Each iteration moves the image by α·sign(∇ₓJ) on the mask-selected
locations, where J is the cross-entropy of the target class, then clips to
[0, 1]. The finished image is snapped onto the 1/255 grid before norms are
measured, so every adversarial example is a valid 8-bit image.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from regional_adv.masks import LocalizationMask
from regional_adv.network import Network
from regional_adv.norms import NormTriple, compute_norms
from regional_adv.tensor import Tensor

logger = logging.getLogger(__name__)

GRID_TOLERANCE = 1e-3


class AttackError(RuntimeError):
    """Raised when an attack cannot continue, e.g. on a non-finite gradient."""


class SignConvention(str, Enum):
    # step against ∇J, lowering the target-class loss
    DESCEND = "descend"
    # step along ∇J, as the update rule reads literally
    ASCEND = "ascend"


class TargetStrategy(str, Enum):
    RANDOM_OTHER = "random_other"
    FIXED = "fixed"
    LEAST_LIKELY = "least_likely"


@dataclass(frozen=True)
class AttackConfig:
    """
    Attack settings.

    ``mask`` None means the unlocalized attack. ``epsilon`` optionally keeps
    each iterate within an L∞ ball around the start image; protocol runs
    leave it unset and rely on the 1/255 discretization alone.
    """

    alpha: float = 0.004
    max_iterations: int = 250
    target_strategy: TargetStrategy = TargetStrategy.RANDOM_OTHER
    target_seed: int = 0
    fixed_class: int | None = None
    sign_convention: SignConvention = SignConvention.DESCEND
    mask: LocalizationMask | None = None
    stop_on_source_success: bool = True
    epsilon: float | None = None

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.max_iterations < 1:
            raise ValueError(
                f"max_iterations must be at least 1, got {self.max_iterations}"
            )
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if (
            TargetStrategy(self.target_strategy) is TargetStrategy.FIXED
            and self.fixed_class is None
        ):
            raise ValueError("the fixed target strategy needs fixed_class")


@dataclass(frozen=True, eq=False)
class AttackOutcome:
    """
    ``original`` is the start image as attacked (on the 1/255 grid) and
    ``adversarial`` the quantized result; both are float64 C×H×W arrays.
    """

    original: np.ndarray
    adversarial: np.ndarray
    iterations_used: int
    source_success: bool
    target_class: int
    predicted_class: int
    norms: NormTriple


def quantize(x: Tensor) -> np.ndarray:
    """
    Snap values in [0, 1] to the nearest multiple of 1/255, halves rounding up.

    Raises:
        ValueError: If any value is non-finite or outside [0, 1].
    """
    values = np.asarray(x, dtype=np.float64)
    if values.size and (
        not np.all(np.isfinite(values)) or values.min() < 0 or values.max() > 1
    ):
        raise ValueError("quantize expects finite values within [0, 1]")
    return np.floor(values * 255 + 0.5) / 255


def _check_on_grid(x: np.ndarray) -> None:
    scaled = x * 255
    if np.any(np.abs(scaled - np.rint(scaled)) > GRID_TOLERANCE):
        raise ValueError(
            "attack input must lie on the 1/255 grid; quantize it first"
        )


def _reaches(model: Network, x: Tensor, target_class: int) -> bool:
    # judged on the 8-bit image that will be reported
    snapped = quantize(x).astype(model.dtype)
    return int(np.argmax(model.forward(snapped))) == target_class


def _sign_step(grad: Tensor, alpha: float) -> Tensor:
    if not np.all(np.isfinite(grad)):
        raise AttackError("input gradient contains NaN or Inf")
    return alpha * np.sign(grad)


def perturbation_step(
    model: Network, x: Tensor, class_index: int, alpha: float
) -> Tensor:
    """
    α·sign(∇ₓJ) for the cross-entropy J of ``class_index`` at ``x``.

    Entries where the gradient is exactly zero get a zero step.
    """
    _, _, grad = model.logits_and_input_gradient(x, class_index)
    return _sign_step(grad, alpha)


def choose_target(
    model: Network,
    x: Tensor,
    strategy: TargetStrategy,
    seed: int = 0,
    fixed_class: int | None = None,
    true_label: int | None = None,
) -> int:
    """
    Pick the class an attack steers toward.

    Args:
        model: Source model.
        x: Start image.
        strategy: random_other draws uniformly among classes other than the
            current prediction, least_likely takes the lowest logit and fixed
            returns ``fixed_class``.
        seed: Seed for random_other.
        fixed_class: Class for the fixed strategy.
        true_label: When given, a fixed class equal to it is rejected.

    Raises:
        ValueError: If the fixed class is missing, out of range or the true label.
    """
    strategy = TargetStrategy(strategy)
    if strategy is TargetStrategy.FIXED:
        if fixed_class is None or not 0 <= fixed_class < model.num_classes:
            raise ValueError(f"invalid fixed target class {fixed_class}")
        if true_label is not None and fixed_class == true_label:
            raise ValueError(
                f"fixed target class {fixed_class} equals the true label"
            )
        return int(fixed_class)

    logits = model.forward(x)
    if strategy is TargetStrategy.LEAST_LIKELY:
        return int(np.argmin(logits))

    current = int(np.argmax(logits))
    rng = np.random.default_rng(seed)
    while True:
        candidate = int(rng.integers(model.num_classes))
        if candidate != current:
            return candidate


def run_attack(
    model: Network,
    x: Tensor,
    cfg: AttackConfig,
    target_class: int | None = None,
) -> AttackOutcome:
    """
    Run the iterative sign-gradient attack from ``x``.

    The loop stops before the first step at which the source model already
    predicts the target class on the quantized iterate (unless
    ``cfg.stop_on_source_success`` is off) or after ``cfg.max_iterations``
    steps. Locations outside ``cfg.mask`` are never written.

    ``x`` must already lie on the 1/255 grid, not merely in [0, 1]: a start
    image between grid steps would be moved by the final quantization even
    where the mask excludes it.

    Args:
        model: Source model.
        x: Start image, C×H×W on the 1/255 grid.
        cfg: Attack settings.
        target_class: Overrides ``cfg.target_strategy`` when given, so several
            attacks on one image can share a target.

    Returns:
        The quantized adversarial image with its norms against ``x``.

    Raises:
        ValueError: On off-grid input or a target equal to the current
            prediction under a non-fixed strategy.
        AttackError: If the gradient becomes non-finite.
    """
    start = model.prepare_input(x)
    if start.ndim != 3:
        raise ValueError(f"run_attack takes a single C×H×W image, got {start.shape}")
    original = quantize(start)
    _check_on_grid(np.asarray(start, dtype=np.float64))

    if target_class is None:
        target_class = choose_target(
            model,
            original,
            cfg.target_strategy,
            seed=cfg.target_seed,
            fixed_class=cfg.fixed_class,
        )
    if not 0 <= target_class < model.num_classes:
        raise ValueError(f"target class {target_class} out of range")

    x_n = original.astype(model.dtype)
    if TargetStrategy(cfg.target_strategy) is not TargetStrategy.FIXED:
        initial = int(np.argmax(model.forward(x_n)))
        if initial == target_class:
            raise ValueError(
                f"target class {target_class} is already the model's prediction"
            )

    descend = SignConvention(cfg.sign_convention) is SignConvention.DESCEND
    direction = -1 if descend else 1
    multiplier = None
    if cfg.mask is not None:
        if cfg.mask.grid.shape != x_n.shape[1:]:
            raise ValueError(
                f"mask of size {cfg.mask.size} does not fit image {x_n.shape}"
            )
        multiplier = cfg.mask.multiplier(model.dtype)
    bounds = None
    if cfg.epsilon is not None:
        bounds = (np.clip(x_n - cfg.epsilon, 0, 1), np.clip(x_n + cfg.epsilon, 0, 1))

    iterations = 0
    for _ in range(cfg.max_iterations):
        if cfg.stop_on_source_success and _reaches(model, x_n, target_class):
            break
        _, _, grad = model.logits_and_input_gradient(x_n, target_class)
        step = _sign_step(grad, cfg.alpha)
        if multiplier is not None:
            step = step * multiplier
        x_n = np.clip(x_n + direction * step, 0, 1).astype(model.dtype, copy=False)
        if bounds is not None:
            x_n = np.clip(x_n, *bounds)
        iterations += 1

    adversarial = quantize(x_n)
    predicted = int(np.argmax(model.forward(adversarial)))
    logger.debug(
        "Attack toward class %d stopped after %d iterations (predicted %d)",
        target_class,
        iterations,
        predicted,
    )
    return AttackOutcome(
        original=original,
        adversarial=adversarial,
        iterations_used=iterations,
        source_success=predicted == target_class,
        target_class=int(target_class),
        predicted_class=predicted,
        norms=compute_norms(original, adversarial),
    )
