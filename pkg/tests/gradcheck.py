"""Central-difference gradient oracle shared by the unit and acceptance
tests. Independent of the autodiff engine: it only ever calls a
value-returning closure."""

import numpy as np

STEP = 1e-6


def numeric_grad(fn, arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """Elementwise central differences of scalar fn w.r.t. arr (in place
    perturbation, restored after)."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Scale-aware norm ratio; 0 when both sides vanish."""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)
