"""Dense float64 helpers shared by the rest of the package.

A "matrix" here is simply a 2-D C-contiguous ``numpy.ndarray`` of dtype float64.
"""
import math

import numpy as np


def as_matrix(a, name="matrix"):
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def flat_inner(a, b):
    """Inner product of two same-shaped arrays viewed as flat vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def frobenius_norm(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.dot(a.ravel(), a.ravel())))


def tanh_map(a):
    return np.tanh(as_matrix(a))


def tanh_deriv(y):
    # derivative expressed through the forward output y = tanh(x)
    y = as_matrix(y)
    return 1.0 - y * y


def log_sigmoid(x):
    """log(1 / (1 + exp(-x))) without overflow."""
    x = float(x)
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


def check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {what}")
