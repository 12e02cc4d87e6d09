"""Central finite-difference gradients for verifying analytic backward passes."""

from typing import Callable

import numpy as np

from regional_adv.tensor import Tensor


def numerical_gradient(
    func: Callable[[Tensor], float],
    x: Tensor,
    step: float = 1e-5,
    indices: np.ndarray | None = None,
) -> Tensor:
    """
    Central differences (f(x + h) - f(x - h)) / 2h of a scalar function.

    Args:
        func: Scalar function of x. It must not keep references to x.
        x: Point of evaluation; not modified.
        step: Perturbation h applied to one entry at a time.
        indices: Optional flat indices to evaluate; other entries stay zero.

    Returns:
        Array shaped like x holding the estimated partial derivatives.
    """
    probe = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(probe)
    flat = probe.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        original = flat[i]
        flat[i] = original + step
        upper = func(probe)
        flat[i] = original - step
        lower = func(probe)
        flat[i] = original
        grad.reshape(-1)[i] = (upper - lower) / (2 * step)
    return grad


def max_relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-4) -> float:
    """
    Largest elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps entries that are zero in both estimates from dominating
    through round-off.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0
