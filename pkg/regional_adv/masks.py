"""
Binary localization masks restricting where an attack may perturb an image.

Masks are spatial N×N grids broadcast across channels. Each family is
parameterized by the fraction of spatial locations it selects:

    center  an s×s block centred on the grid, s = round(N·sqrt(f))
    frame   a border around an untouched (N−w)×(N−w) interior; the total
            width w is split ceil(w/2) top/left and floor(w/2) bottom/right
    random  round(f·N²) distinct locations drawn without replacement
    full    every location (the unlocalized attack)

At N = 224 the center sides 90/120/150 select 16.1/28.7/44.8% of the pixels
and the frame widths 20/34/58 select 17.1/28.1/45.1%.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from regional_adv.netpbm import encode_pgm

logger = logging.getLogger(__name__)

PROTOCOL_FRACTIONS = (0.17, 0.28, 0.45)


class MaskGeometryError(ValueError):
    """Raised when a fraction is out of range or unreachable on the grid."""


class MaskFamily(str, Enum):
    CENTER = "center"
    FRAME = "frame"
    RANDOM = "random"
    FULL = "full"


@dataclass(frozen=True)
class MaskSpec:
    family: MaskFamily
    fraction: float = 1.0
    seed: int = 0
    size: int = 32

    @property
    def label(self) -> str:
        if self.family is MaskFamily.FULL:
            return "full"
        return f"{self.family.value}-{self.fraction:g}"


@dataclass(frozen=True, eq=False)
class LocalizationMask:
    """
    A boolean N×N grid and the fraction of locations it selects.

    ``geometry`` is the integer the generator used: side for center, total
    width for frame, selected count for random, N for full.
    """

    grid: np.ndarray
    realized_fraction: float
    spec: MaskSpec
    geometry: int

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    def multiplier(self, dtype: np.dtype | type = np.float64) -> np.ndarray:
        """The grid as a 1×N×N array of 0/1, broadcastable over C×N×N."""
        return self.grid[np.newaxis].astype(dtype)

    def to_pgm(self) -> bytes:
        return encode_pgm(self.grid.astype(np.float64))

    def write_pgm(self, path: Path) -> None:
        Path(path).write_bytes(self.to_pgm())


def _check_size(size: int) -> None:
    if size < 1:
        raise MaskGeometryError(f"grid size must be positive, got {size}")


def _check_fraction(fraction: float) -> None:
    if not 0 < fraction <= 1:
        raise MaskGeometryError(f"fraction must lie in (0, 1], got {fraction}")


def _make(grid: np.ndarray, spec: MaskSpec, geometry: int) -> LocalizationMask:
    realized = float(np.count_nonzero(grid)) / grid.size
    return LocalizationMask(
        grid=grid, realized_fraction=realized, spec=spec, geometry=geometry
    )


def _round_half_up(value: float) -> int:
    return math.floor(value + 0.5)


def frame_fraction(size: int, width: int) -> float:
    return 1 - ((size - width) / size) ** 2


def solve_geometry(family: MaskFamily, size: int, fraction: float) -> int:
    """
    Integer parameter the generator for ``family`` uses to realize ``fraction``.

    Returns:
        Side length (center), total border width (frame), selected location
        count (random) or the grid size (full).

    Raises:
        MaskGeometryError: If the fraction is outside (0, 1] or rounds to an
            empty center or frame on this grid.
    """
    family = MaskFamily(family)
    _check_size(size)
    _check_fraction(fraction)
    if family is MaskFamily.FULL:
        return size
    if family is MaskFamily.RANDOM:
        return _round_half_up(fraction * size * size)
    if family is MaskFamily.CENTER:
        side = min(size, _round_half_up(size * math.sqrt(fraction)))
        if side == 0:
            raise MaskGeometryError(
                f"fraction {fraction} is unreachable for a center mask on a "
                f"{size}×{size} grid"
            )
        return side

    if fraction == 1:
        return size
    ideal = size * (1 - math.sqrt(1 - fraction))
    candidates = sorted({min(size, math.floor(ideal)), min(size, math.ceil(ideal))})
    # first minimum wins, so ties resolve to the thinner frame
    width = min(candidates, key=lambda w: abs(frame_fraction(size, w) - fraction))
    if width == 0:
        raise MaskGeometryError(
            f"fraction {fraction} is unreachable for a frame mask on a "
            f"{size}×{size} grid"
        )
    return width


def center_square(size: int, fraction: float) -> LocalizationMask:
    side = solve_geometry(MaskFamily.CENTER, size, fraction)
    return center_square_from_side(size, side, fraction)


def center_square_from_side(
    size: int, side: int, fraction: float | None = None
) -> LocalizationMask:
    _check_size(size)
    if not 0 < side <= size:
        raise MaskGeometryError(f"side must lie in [1, {size}], got {side}")
    offset = (size - side) // 2
    grid = np.zeros((size, size), dtype=bool)
    grid[offset : offset + side, offset : offset + side] = True
    requested = (side / size) ** 2 if fraction is None else fraction
    spec = MaskSpec(MaskFamily.CENTER, requested, size=size)
    return _make(grid, spec, side)


def frame(size: int, fraction: float) -> LocalizationMask:
    width = solve_geometry(MaskFamily.FRAME, size, fraction)
    return frame_from_width(size, width, fraction)


def frame_from_width(
    size: int, width: int, fraction: float | None = None
) -> LocalizationMask:
    """Frame of total width ``width``; the thicker border goes top/left."""
    _check_size(size)
    if not 0 < width <= size:
        raise MaskGeometryError(f"width must lie in [1, {size}], got {width}")
    lead = math.ceil(width / 2)
    trail = width // 2
    grid = np.ones((size, size), dtype=bool)
    grid[lead : size - trail, lead : size - trail] = False
    requested = frame_fraction(size, width) if fraction is None else fraction
    spec = MaskSpec(MaskFamily.FRAME, requested, size=size)
    return _make(grid, spec, width)


def random_pixels(size: int, fraction: float, seed: int) -> LocalizationMask:
    count = solve_geometry(MaskFamily.RANDOM, size, fraction)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(size * size, size=count, replace=False)
    grid = np.zeros(size * size, dtype=bool)
    grid[chosen] = True
    spec = MaskSpec(MaskFamily.RANDOM, fraction, seed=seed, size=size)
    return _make(grid.reshape(size, size), spec, count)


def full_mask(size: int) -> LocalizationMask:
    _check_size(size)
    grid = np.ones((size, size), dtype=bool)
    return _make(grid, MaskSpec(MaskFamily.FULL, 1.0, size=size), size)


def build_mask(spec: MaskSpec) -> LocalizationMask:
    family = MaskFamily(spec.family)
    if family is MaskFamily.CENTER:
        return center_square(spec.size, spec.fraction)
    if family is MaskFamily.FRAME:
        return frame(spec.size, spec.fraction)
    if family is MaskFamily.RANDOM:
        return random_pixels(spec.size, spec.fraction, spec.seed)
    return full_mask(spec.size)


def protocol_masks(
    size: int,
    seed: int,
    families: tuple[MaskFamily, ...] = (
        MaskFamily.CENTER,
        MaskFamily.FRAME,
        MaskFamily.RANDOM,
    ),
    fractions: tuple[float, ...] = PROTOCOL_FRACTIONS,
) -> list[LocalizationMask]:
    """
    Masks for every (family, fraction) pair, family-major.

    Random masks take one seed per fraction, derived from ``seed``, so every
    image in a run shares the same nine masks.
    """
    fraction_seeds = np.random.SeedSequence(seed).generate_state(len(fractions))
    masks = []
    for family in families:
        for fraction, fraction_seed in zip(fractions, fraction_seeds, strict=True):
            spec = MaskSpec(
                MaskFamily(family), fraction, seed=int(fraction_seed), size=size
            )
            mask = build_mask(spec)
            logger.debug(
                "%s mask: geometry %d, realized fraction %.4f",
                spec.label,
                mask.geometry,
                mask.realized_fraction,
            )
            masks.append(mask)
    return masks
