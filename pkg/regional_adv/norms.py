"""Distortion between an image and its adversarial counterpart."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NormTriple:
    """
    L0: fraction of spatial locations where any channel changed.
    L2: Euclidean norm of the difference over every entry.
    L∞: largest absolute entry change.
    """

    l0: float
    l2: float
    linf: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.l0, self.l2, self.linf)


def _pair(original: np.ndarray, adversarial: np.ndarray) -> np.ndarray:
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(adversarial, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a - b


def l0(original: np.ndarray, adversarial: np.ndarray) -> float:
    """
    Fraction of the H·W spatial locations where any channel differs.

    Comparison is exact; both images are expected on the 1/255 grid.
    """
    diff = _pair(original, adversarial)
    if diff.ndim != 3:
        raise ValueError(f"expected C×H×W images, got shape {diff.shape}")
    changed = np.any(diff != 0, axis=0)
    return float(np.count_nonzero(changed)) / changed.size


def l2(original: np.ndarray, adversarial: np.ndarray) -> float:
    return float(np.sqrt(np.sum(_pair(original, adversarial) ** 2)))


def linf(original: np.ndarray, adversarial: np.ndarray) -> float:
    diff = _pair(original, adversarial)
    return float(np.max(np.abs(diff))) if diff.size else 0.0


def compute_norms(original: np.ndarray, adversarial: np.ndarray) -> NormTriple:
    return NormTriple(
        l0=l0(original, adversarial),
        l2=l2(original, adversarial),
        linf=linf(original, adversarial),
    )
