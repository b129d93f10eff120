"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import GraphError
from .tensor import Tensor, backward

Array = np.ndarray


def numerical_gradient(f: Callable[[Array], float], x: Array, step: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function, element by element."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.copy()
    for i in range(flat.size):
        orig = flat.flat[i]
        flat.flat[i] = orig + step
        up = f(flat)
        flat.flat[i] = orig - step
        down = f(flat)
        flat.flat[i] = orig
        grad.flat[i] = (up - down) / (2.0 * step)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Compare the analytic gradient of ``f`` at ``x`` against central differences.

    Returns the maximum over elements of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    ``f`` must map a tensor to a scalar tensor; ``step`` must lie in
    ``(0, 1e-2]`` so the difference quotient stays in the float64 sweet spot.
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"grad_check step must be in (0, 1e-2], got {step}")

    leaf = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.shape != ():
        raise GraphError("grad_check requires f to return a scalar tensor")
    backward(out)
    analytic = leaf.grad
    if analytic is None:
        analytic = np.zeros_like(leaf.data)

    numeric = numerical_gradient(lambda arr: float(f(Tensor(arr)).data), x.data, step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
