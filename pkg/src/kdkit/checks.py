"""Central finite-difference gradient checking (64-bit only)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_gradient(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every element of ``x``.

    ``f`` must re-run the forward pass from the current parameter values.
    """
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f().data)
        flat[i] = orig - step
        fm = float(f().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-2) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor],
                    step: float = 1e-5, rel_tol: float = 1e-4) -> float:
    """Compare autodiff gradients of ``f()`` against central differences.

    Returns the worst relative error over all parameters; raises AssertionError
    if it exceeds ``rel_tol``.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(f, p, step=step)
        err = max_relative_error(np.asarray(analytic, dtype=np.float64), numeric)
        worst = max(worst, err)
    if worst > rel_tol:
        raise AssertionError(f"gradient check failed: rel err {worst:.3e} > {rel_tol:.1e}")
    return worst
