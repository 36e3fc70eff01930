"""Shared test helpers"""

import numpy as np


def numeric_gradient(fn, value: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of an array, in place"""
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + step
        plus = fn()
        flat[index] = original - step
        minus = fn()
        flat[index] = original
        grad.reshape(-1)[index] = (plus - minus) / (2.0 * step)
    return grad


def assert_gradient_close(testcase, analytic, estimate, tolerance: float = 1e-5):
    """Relative gradient error |g - fd| / max(1, |fd|) below tolerance"""
    error = np.abs(analytic - estimate) / np.maximum(1.0, np.abs(estimate))
    testcase.assertLess(float(error.max()), tolerance)
