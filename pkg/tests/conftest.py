"""Shared test fixtures and the central finite-difference gradient oracle.

The oracle is intentionally independent of the autodiff tape: it re-evaluates
the forward function at perturbed inputs and never inspects recorded graphs.
"""

import numpy as np
import pytest

from certsr.rng import RngStream


def numeric_gradient(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x."""
    x = np.array(x, dtype=np.float64, order="C")
    flat = np.zeros(x.size)
    xw = x.reshape(-1).copy()
    for i in range(xw.size):
        orig = xw[i]
        xw[i] = orig + h
        fp = fn(xw.reshape(x.shape))
        xw[i] = orig - h
        fm = fn(xw.reshape(x.shape))
        xw[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return flat.reshape(x.shape)


def rel_err(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    """Scale-aware worst-entry discrepancy between two gradients."""
    denom = max(1e-12, float(np.max(np.abs(g_fd))))
    return float(np.max(np.abs(g_ad - g_fd))) / denom


@pytest.fixture
def rng():
    return RngStream(seed=20250, stream_id=0)
