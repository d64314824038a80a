"""Finite-difference gradient verification.

Run under `gradcheck_mode()` so tensors are float64; central differences at
h=1e-5 lose too many digits at float32.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f() with respect to `param`."""
    g = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f().item()
        flat[i] = orig - h
        lo = f().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|ga-gn| scaled by the larger of the two magnitudes (floor 1e-8)."""
    diff = np.abs(analytic.astype(np.float64) - numeric.astype(np.float64)).max(initial=0.0)
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-8)
    return float(diff / scale)


def check_gradients(f: Callable[[], Tensor], params: list[Tensor],
                    h: float = 1e-5) -> float:
    """Backward pass vs finite differences for every param; worst relative error."""
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(f, p, h=h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
