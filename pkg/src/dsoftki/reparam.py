"""Smooth positivity reparametrization shared by all trainable parameters.

Positive quantities (lengthscales, scale, temperatures, noise variances)
are stored as unconstrained reals w and materialized as

    value = floor + softplus(w)

so gradient steps can never push them out of their domain. Floors differ
per parameter family and are chosen where the quantity enters a division.
"""

import numpy as np


LENGTHSCALE_FLOOR = 1e-6
SCALE_FLOOR = 1e-6
TEMPERATURE_FLOOR = 1e-4
NOISE_FLOOR = 1e-6


def softplus(w):
    return np.logaddexp(0.0, w)


def softplus_grad(w):
    """d softplus / dw, the logistic sigmoid."""
    out = np.empty_like(np.asarray(w, dtype=np.float64))
    w = np.asarray(w, dtype=np.float64)
    pos = w >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-w[pos]))
    ew = np.exp(w[~pos])
    out[~pos] = ew / (1.0 + ew)
    return out


def inv_softplus(v):
    """Inverse of softplus, stable for both small and large v."""
    v = np.asarray(v, dtype=np.float64)
    # log(expm1(v)) = v + log1p(-exp(-v)); the direct form overflows for v > ~700
    return np.where(v > 30, v, np.log(np.expm1(np.minimum(v, 30.0))))


def to_positive(w, floor):
    return floor + softplus(w)


def from_positive(value, floor):
    value = np.asarray(value, dtype=np.float64)
    if np.any(value <= floor):
        raise ValueError(f"value must exceed the floor {floor}")
    return inv_softplus(value - floor)
