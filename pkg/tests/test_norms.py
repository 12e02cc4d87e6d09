"""Tests for the distortion norms."""

import numpy as np
import pytest

from regional_adv.norms import NormTriple, compute_norms, l0, l2, linf


def brute_force(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    channels, height, width = a.shape
    changed = 0
    squares = 0.0
    largest = 0.0
    for y in range(height):
        for x in range(width):
            moved = False
            for c in range(channels):
                delta = float(a[c, y, x] - b[c, y, x])
                if delta != 0:
                    moved = True
                squares += delta * delta
                largest = max(largest, abs(delta))
            changed += moved
    return changed / (height * width), squares**0.5, largest


class TestNorms:
    """Test L0, L2 and L∞."""

    def test_identical_images(self) -> None:
        """Test that an unchanged image has zero distortion."""
        image = np.full((3, 4, 4), 0.5)

        assert compute_norms(image, image.copy()) == NormTriple(0.0, 0.0, 0.0)

    def test_single_location(self) -> None:
        """Test a change in two channels of one location."""
        a = np.zeros((3, 4, 4))
        b = a.copy()
        b[0, 1, 2] = 0.3
        b[2, 1, 2] = -0.4

        assert l0(a, b) == pytest.approx(1 / 16)
        assert l2(a, b) == pytest.approx(0.5)
        assert linf(a, b) == pytest.approx(0.4)

    def test_as_tuple(self) -> None:
        """Test the tuple view order."""
        assert NormTriple(0.1, 0.2, 0.3).as_tuple() == (0.1, 0.2, 0.3)

    def test_shape_mismatch(self) -> None:
        """Test that images must share a shape."""
        with pytest.raises(ValueError, match="shapes differ"):
            l2(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))

    def test_l0_needs_channels(self) -> None:
        """Test that L0 is defined on C×H×W images only."""
        with pytest.raises(ValueError):
            l0(np.zeros((4, 4)), np.zeros((4, 4)))

    def test_against_brute_force(self) -> None:
        """Test all three norms against a per-entry loop on random pairs."""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = rng.integers(0, 256, size=(3, 4, 4)) / 255
            b = a.copy()
            touched = rng.uniform(size=(3, 4, 4)) < 0.2
            b[touched] = rng.integers(0, 256, size=touched.sum()) / 255

            expected = brute_force(a, b)
            got = compute_norms(a, b).as_tuple()

            assert got[0] == expected[0]
            assert got[1] == pytest.approx(expected[1], rel=1e-12, abs=1e-15)
            assert got[2] == expected[2]
