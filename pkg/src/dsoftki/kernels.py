"""RBF kernel with ARD lengthscales and output scale.

The closed-form first and second derivatives of the kernel are only
needed by the exact oracle; the interpolated model never differentiates
the kernel itself.
"""

import numpy as np

from . import reparam


class KernelParams:
    """ARD-RBF hyperparameters stored through the positivity bijection.

    k(x, x') = scale * exp(-0.5 * sum_i (x_i - x'_i)^2 / lengthscales_i^2)
    """

    def __init__(self, raw_lengthscales, raw_scale):
        self.raw_lengthscales = np.asarray(raw_lengthscales, dtype=np.float64)
        self.raw_scale = float(raw_scale)

    @classmethod
    def from_positive(cls, lengthscales, scale):
        lengthscales = np.atleast_1d(np.asarray(lengthscales, dtype=np.float64))
        return cls(
            reparam.from_positive(lengthscales, reparam.LENGTHSCALE_FLOOR),
            float(reparam.from_positive(scale, reparam.SCALE_FLOOR)),
        )

    @property
    def lengthscales(self):
        return reparam.to_positive(self.raw_lengthscales, reparam.LENGTHSCALE_FLOOR)

    @property
    def scale(self):
        return float(reparam.to_positive(self.raw_scale, reparam.SCALE_FLOOR))

    @property
    def dim(self):
        return self.raw_lengthscales.shape[0]


def kernel_eval(x, x2, params):
    """Kernel value at a single pair of points."""
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    diff = (x - x2) / params.lengthscales
    return params.scale * np.exp(-0.5 * np.dot(diff, diff))


def kernel_matrix(x, z, params, dtype=np.float64):
    """Cross-covariance matrix K[i, j] = k(x_i, z_j)."""
    x = np.asarray(x, dtype=dtype)
    z = np.asarray(z, dtype=dtype)
    ell = params.lengthscales.astype(dtype)
    scale = dtype(params.scale) if dtype != np.float64 else params.scale
    xs = x / ell
    zs = z / ell
    sq = (
        np.sum(xs**2, axis=1)[:, None]
        + np.sum(zs**2, axis=1)[None, :]
        - 2.0 * xs @ zs.T
    )
    np.maximum(sq, 0.0, out=sq)
    return scale * np.exp(-0.5 * sq)


def kernel_matrix_vjp(z, params, kbar, kmat=None):
    """Backward pass of ``kernel_matrix(z, z, params)``.

    Given the upstream gradient ``kbar`` (m, m) with respect to the kernel
    matrix, accumulates gradients with respect to z, the lengthscales and
    the scale (all in their positive parametrization).

    Returns
    -------
    (z_bar, ell_bar, scale_bar)
    """
    z = np.asarray(z, dtype=np.float64)
    ell = params.lengthscales
    if kmat is None:
        kmat = kernel_matrix(z, z, params)
    m = kbar * kmat
    scale_bar = float(np.sum(m)) / params.scale
    # d k_ab / d ell_c = k_ab * (z_ac - z_bc)^2 / ell_c^3, expanded so the
    # pairwise square never materializes per dimension
    rs = m.sum(axis=1)
    cs = m.sum(axis=0)
    mz = m @ z
    zm = m.T @ z
    sq_contract = rs @ (z**2) + cs @ (z**2) - 2.0 * np.sum(z * mz, axis=0)
    ell_bar = sq_contract / ell**3
    s = m + m.T
    z_bar = -((s.sum(axis=1)[:, None] * z) - (mz + zm)) / ell[None, :] ** 2
    return z_bar, ell_bar, scale_bar


def kernel_grad_x1(x, x2, params):
    """Gradient of k(x, x2) with respect to its first argument."""
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    k = kernel_eval(x, x2, params)
    return -k * (x - x2) / params.lengthscales**2


def kernel_hess_cross(x, x2, params):
    """Mixed second derivative matrix d^2 k / (dx_i dx2_j)."""
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    k = kernel_eval(x, x2, params)
    inv2 = 1.0 / params.lengthscales**2
    w = (x - x2) * inv2
    return k * (np.diag(inv2) - np.outer(w, w))


def gpwd_block(x, x2, params):
    """(d+1) x (d+1) joint value/gradient covariance block for one pair.

    Layout: [[k, dk/dx2^T], [dk/dx, d^2k/dx dx2^T]].
    """
    d = np.asarray(x).shape[0]
    block = np.empty((d + 1, d + 1))
    block[0, 0] = kernel_eval(x, x2, params)
    g1 = kernel_grad_x1(x, x2, params)
    block[1:, 0] = g1
    block[0, 1:] = -g1  # gradient wrt the second argument flips the sign
    block[1:, 1:] = kernel_hess_cross(x, x2, params)
    return block


def gpwd_kernel_matrix(x, x2, params):
    """Full joint covariance of values and gradients, (n(d+1), n2(d+1)).

    Rows/columns are interleaved per point: value row first, then the d
    gradient rows. Built vectorized rather than block-by-block.
    """
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n, d = x.shape
    n2 = x2.shape[0]
    ell2 = params.lengthscales**2
    k = kernel_matrix(x, x2, params)
    diff = (x[:, None, :] - x2[None, :, :]) / ell2[None, None, :]  # (n, n2, d)
    out = np.empty((n * (d + 1), n2 * (d + 1)))
    big = out.reshape(n, d + 1, n2, d + 1)
    big[:, 0, :, 0] = k
    big[:, 1:, :, 0] = np.swapaxes(-k[:, :, None] * diff, 1, 2)
    big[:, 0, :, 1:] = k[:, :, None] * diff
    hess = k[:, :, None, None] * (
        np.diag(1.0 / ell2)[None, None, :, :]
        - diff[:, :, :, None] * diff[:, :, None, :]
    )
    big[:, 1:, :, 1:] = np.swapaxes(hess, 1, 2)
    return out
