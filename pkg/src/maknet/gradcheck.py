"""Central finite-difference gradient verification.

The numeric side evaluates only forward values, so it is independent of the
backward closures it is used to check.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad

__all__ = ["numeric_gradient", "max_rel_error", "check_gradient"]


def numeric_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8
) -> float:
    """max |analytic - numeric| / (|numeric| + floor) over all elements."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + floor)))


def check_gradient(
    forward: Callable[[Tensor], Tensor],
    x: np.ndarray,
    h: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Compare backward() against central differences for scalar `forward`.

    `forward` maps an input Tensor to a scalar Tensor. Returns the max
    relative error between the analytic and numeric input gradients.
    """
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    out = forward(xt)
    out.backward()
    analytic = xt.grad.copy()

    def value(arr: np.ndarray) -> float:
        with no_grad():
            return forward(Tensor(arr)).item()

    numeric = numeric_gradient(value, np.asarray(x, dtype=np.float64), h=h)
    return max_rel_error(analytic, numeric, floor=floor)
