"""Exact GP and GP-with-derivatives regression at oracle scale.

These dense solvers exist to validate the interpolated model and to score
small problems exactly; a guard caps the joint system size.
"""

import numpy as np

from . import reparam
from .kernels import gpwd_kernel_matrix, kernel_matrix
from .linalg import cholesky_safe, solve_lower, solve_upper

ORACLE_MAX_ROWS = 4000

LOG_2PI = float(np.log(2.0 * np.pi))


class GpwdNoise:
    """Value and gradient observation noise variances (positive, floored)."""

    def __init__(self, raw_value_var, raw_grad_var):
        self.raw_value_var = float(raw_value_var)
        self.raw_grad_var = float(raw_grad_var)

    @classmethod
    def from_positive(cls, value_var, grad_var):
        return cls(
            float(reparam.from_positive(value_var, reparam.NOISE_FLOOR)),
            float(reparam.from_positive(grad_var, reparam.NOISE_FLOOR)),
        )

    @property
    def value_var(self):
        return float(reparam.to_positive(self.raw_value_var, reparam.NOISE_FLOOR))

    @property
    def grad_var(self):
        return float(reparam.to_positive(self.raw_grad_var, reparam.NOISE_FLOOR))

    def diagonal(self, n, d):
        """Interleaved n(d+1) noise diagonal: value row then d gradient rows."""
        block = np.concatenate(([self.value_var], np.full(d, self.grad_var)))
        return np.tile(block, n)


def _check_guard(rows):
    if rows > ORACLE_MAX_ROWS:
        raise ValueError(
            f"exact solver guard: {rows} joint observations exceed {ORACLE_MAX_ROWS}"
        )


def _spd_solve(lfac, b):
    return solve_upper(lfac.L.T, solve_lower(lfac.L, b))


def exact_gpwd_mll(x, ytil, kparams, noise):
    """Log marginal likelihood of joint value/gradient labels.

    ``ytil`` is the interleaved n(d+1) label vector [y_i, dy_i].
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ytil = np.asarray(ytil, dtype=np.float64)
    n, d = x.shape
    _check_guard(n * (d + 1))
    cov = gpwd_kernel_matrix(x, x, kparams)
    cov[np.diag_indices_from(cov)] += noise.diagonal(n, d)
    lfac = cholesky_safe(cov)
    alpha = _spd_solve(lfac, ytil)
    logdet = 2.0 * np.sum(np.log(np.diag(lfac.L)))
    return -0.5 * (ytil @ alpha + logdet + ytil.size * LOG_2PI)


def exact_gpwd_posterior(x, ytil, kparams, noise, xstar):
    """Joint posterior mean and covariance over values and gradients.

    Returns (mean, cov) with mean of length nstar*(d+1) in interleaved
    layout and cov symmetrized.
    """
    xstar = np.atleast_2d(np.asarray(xstar, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64).reshape(-1, xstar.shape[1])
    n, d = x.shape
    _check_guard(max(n, xstar.shape[0]) * (d + 1))
    prior = gpwd_kernel_matrix(xstar, xstar, kparams)
    if n == 0:
        return np.zeros(xstar.shape[0] * (d + 1)), 0.5 * (prior + prior.T)
    ytil = np.asarray(ytil, dtype=np.float64)
    cov = gpwd_kernel_matrix(x, x, kparams)
    cov[np.diag_indices_from(cov)] += noise.diagonal(n, d)
    lfac = cholesky_safe(cov)
    cross = gpwd_kernel_matrix(xstar, x, kparams)
    mean = cross @ _spd_solve(lfac, ytil)
    half = solve_lower(lfac.L, cross.T)
    post = prior - half.T @ half
    return mean, 0.5 * (post + post.T)


def exact_gp_posterior(x, y, kparams, noise_var, xstar):
    """Value-only GP posterior mean and covariance."""
    xstar = np.atleast_2d(np.asarray(xstar, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64).reshape(-1, xstar.shape[1])
    n = x.shape[0]
    _check_guard(max(n, xstar.shape[0]))
    prior = kernel_matrix(xstar, xstar, kparams)
    if n == 0:
        return np.zeros(xstar.shape[0]), 0.5 * (prior + prior.T)
    y = np.asarray(y, dtype=np.float64)
    cov = kernel_matrix(x, x, kparams)
    cov[np.diag_indices_from(cov)] += float(noise_var)
    lfac = cholesky_safe(cov)
    cross = kernel_matrix(xstar, x, kparams)
    mean = cross @ _spd_solve(lfac, y)
    half = solve_lower(lfac.L, cross.T)
    post = prior - half.T @ half
    return mean, 0.5 * (post + post.T)


def exact_gp_mll(x, y, kparams, noise_var):
    """Log marginal likelihood of a value-only GP."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    _check_guard(x.shape[0])
    cov = kernel_matrix(x, x, kparams)
    cov[np.diag_indices_from(cov)] += float(noise_var)
    lfac = cholesky_safe(cov)
    alpha = _spd_solve(lfac, y)
    logdet = 2.0 * np.sum(np.log(np.diag(lfac.L)))
    return -0.5 * (y @ alpha + logdet + y.size * LOG_2PI)
