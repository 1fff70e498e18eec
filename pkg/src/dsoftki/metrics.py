"""Pure metric functions over predictions and labels (raw units)."""

import numpy as np

from .exact import LOG_2PI


def value_rmse(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def gradient_rmse(pred, truth):
    """Root of the total squared gradient error over n*d components."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def gaussian_nll(pred, var, truth):
    """Mean negative log density of the truth under per-output Gaussians."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    var = np.asarray(var, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    var = np.maximum(var, 1e-300)
    return float(np.mean(0.5 * (np.log(var) + LOG_2PI + (truth - pred) ** 2 / var)))
