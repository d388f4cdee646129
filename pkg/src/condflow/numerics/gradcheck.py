"""Central finite-difference oracle for gradient verification.

Deliberately independent of the recorded-operation machinery: it only ever
calls the function under test at perturbed points, so it can referee the
reverse-mode results.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from condflow.errors import NumericError


def finite_difference_gradient(f: Callable[[np.ndarray], float],
                               p: np.ndarray,
                               h: float = 1e-5) -> np.ndarray:
    """Estimate df/dp by central differences, one coordinate at a time.

    ``f`` maps an array with the shape of ``p`` to a scalar; ``h`` is the
    half-step. Accuracy is O(h^2) for smooth f.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    p = np.asarray(p, dtype=np.float64)
    grad = np.zeros_like(p)
    flat = grad.reshape(-1)
    base = p.copy()
    it = base.reshape(-1)
    for i in range(it.size):
        orig = it[i]
        it[i] = orig + h
        f_plus = float(f(base))
        it[i] = orig - h
        f_minus = float(f(base))
        it[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("non-finite function value during finite differencing")
        flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(actual: np.ndarray, reference: np.ndarray,
                       floor: float = 1e-6) -> float:
    """Worst-case elementwise |a-b| / (|a|+|b|+floor).

    The symmetric denominator keeps near-zero reference entries from
    reporting spurious mismatch while staying within a factor of two of the
    plain relative error for O(1) gradients.
    """
    a = np.asarray(actual, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = np.abs(a) + np.abs(b) + floor
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
