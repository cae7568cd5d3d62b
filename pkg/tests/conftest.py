import numpy as np
import pytest

from poglm.rng import SeededRng


@pytest.fixture
def rng():
    return SeededRng(1234)


def central_difference(fn, x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Independent gradient oracle: central finite differences of a scalar fn."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        gflat[i] = (fn(xp.reshape(x0.shape)) - fn(xm.reshape(x0.shape))) / (2 * h)
    return grad


def assert_close_rel(actual, expected, rel: float, abs_floor: float = 1e-7):
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(actual), np.abs(expected)), abs_floor / rel)
    err = np.abs(actual - expected) / scale
    assert np.all(err <= rel), f"max relative error {err.max():.3e} > {rel:.1e}"
