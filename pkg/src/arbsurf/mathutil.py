"""Small numeric helpers shared across modules."""

from __future__ import annotations

import numpy as np


def softplus(x):
    """log(1 + exp(x)) with the overflow-safe branch for large x."""
    return np.logaddexp(0.0, x)


def sigmoid(x):
    """Derivative of softplus."""
    out = np.empty_like(np.asarray(x, dtype=float))
    x = np.asarray(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inv_softplus(y):
    """Inverse of softplus on (0, inf); y = softplus(x) -> x."""
    y = np.asarray(y, dtype=float)
    # log(expm1(y)) but stable for large y where expm1 overflows
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def relu(x):
    return np.maximum(x, 0.0)
