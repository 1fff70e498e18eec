"""Softmax interpolation with per-point temperature vectors.

Each interpolation point z_k carries its own positive temperature vector
T_k. For an input x the interpolation weights are

    sigma_j(x) = exp(a_j) / sum_k exp(a_k),   a_k = -|| x / T_k - z_k ||

so nearby points can still be told apart by orientation. The weight
gradients with respect to x form the extra rows of the block interpolation
operator; they use a small epsilon in the norm denominator to stay finite
at coincidence.

The input-gradient here is defined as the true derivative of the weights
(validated against finite differences), with the epsilon regularisation
applied inside the distance gradient only.
"""

import numpy as np

from . import reparam

DEFAULT_EPS = 1e-8

# memory cap for the (chunk, m, d) intermediates during assembly
_CHUNK_TARGET = 4_000_000


class InterpField:
    """Interpolation points with their learnable temperature vectors.

    Parameters
    ----------
    z : (m, d) ndarray
        Interpolation point locations (unconstrained).
    raw_t : ndarray
        Unconstrained temperatures; shape (m, d), or (d,) when
        ``shared_temperature`` ties one temperature vector across points.
    eps : float
        Stabilizer added to the distance in the weight-gradient formula.
    shared_temperature : bool
        Ablation switch reproducing the single-temperature scheme.
    """

    def __init__(self, z, raw_t, eps=DEFAULT_EPS, shared_temperature=False):
        self.z = np.asarray(z, dtype=np.float64)
        self.raw_t = np.asarray(raw_t, dtype=np.float64)
        self.eps = float(eps)
        self.shared_temperature = bool(shared_temperature)
        if shared_temperature:
            if self.raw_t.ndim != 1 or self.raw_t.shape[0] != self.z.shape[1]:
                raise ValueError("shared temperature must have shape (d,)")
        elif self.raw_t.shape != self.z.shape:
            raise ValueError("temperatures must match the point matrix shape")

    @classmethod
    def from_positive(cls, z, t, eps=DEFAULT_EPS, shared_temperature=False):
        return cls(
            z,
            reparam.from_positive(t, reparam.TEMPERATURE_FLOOR),
            eps=eps,
            shared_temperature=shared_temperature,
        )

    @property
    def m(self):
        return self.z.shape[0]

    @property
    def dim(self):
        return self.z.shape[1]

    @property
    def temperatures(self):
        """Temperature matrix, always materialized as (m, d)."""
        t = reparam.to_positive(self.raw_t, reparam.TEMPERATURE_FLOOR)
        if self.shared_temperature:
            t = np.broadcast_to(t, self.z.shape)
        return t


def _distances(x, field, dtype=np.float64):
    """Scaled offsets u = x/T_k - z_k and their norms, batched over rows.

    Returns (u, r) with shapes (n, m, d) and (n, m).
    """
    x = np.atleast_2d(np.asarray(x, dtype=dtype))
    t = field.temperatures.astype(dtype)
    z = field.z.astype(dtype)
    u = x[:, None, :] / t[None, :, :] - z[None, :, :]
    r = np.sqrt(np.sum(u * u, axis=2))
    return u, r


def _softmax(a):
    shifted = a - np.max(a, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_weights(x, field, dtype=np.float64):
    """Interpolation weights sigma(x), an m-vector summing to one."""
    _, r = _distances(x, field, dtype=dtype)
    out = _softmax(-r)
    return out[0] if np.asarray(x).ndim == 1 else out


def softmax_weight_grads(x, field, dtype=np.float64):
    """Input-gradients of the weights: (m, d) with rows grad_x sigma_j.

    Rows sum to zero over j because the weights sum to one.
    """
    single = np.asarray(x).ndim == 1
    u, r = _distances(x, field, dtype=dtype)
    sigma = _softmax(-r)
    t = field.temperatures.astype(dtype)
    g = -u / (t[None, :, :] * (r[:, :, None] + dtype(field.eps)))
    gbar = np.einsum("nm,nmd->nd", sigma, g)
    grads = sigma[:, :, None] * (g - gbar[:, None, :])
    return grads[0] if single else grads


def assemble_interp(x, field, value_only=False, dtype=np.float64):
    """Stack per-point [weights; weight-gradients] blocks into one matrix.

    The output has one (d+1)-row block per data point in interleaved
    layout (value row, then d gradient rows), shape (n*(d+1), m). With
    ``value_only`` the gradient rows are dropped, giving the plain n x m
    weight matrix.
    """
    x = np.atleast_2d(np.asarray(x, dtype=dtype))
    n, d = x.shape
    m = field.m
    rows = n if value_only else n * (d + 1)
    out = np.empty((rows, m), dtype=dtype)
    chunk = max(1, _CHUNK_TARGET // max(m * d, 1))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        xb = x[lo:hi]
        if value_only:
            out[lo:hi] = softmax_weights(xb, field, dtype=dtype)
            continue
        u, r = _distances(xb, field, dtype=dtype)
        sigma = _softmax(-r)
        t = field.temperatures.astype(dtype)
        g = -u / (t[None, :, :] * (r[:, :, None] + dtype(field.eps)))
        gbar = np.einsum("nm,nmd->nd", sigma, g)
        grads = sigma[:, :, None] * (g - gbar[:, None, :])  # (b, m, d)
        block = out[lo * (d + 1) : hi * (d + 1)].reshape(hi - lo, d + 1, m)
        block[:, 0, :] = sigma
        block[:, 1:, :] = np.swapaxes(grads, 1, 2)
    return out


def value_row_indices(n, d):
    """Row indices of the value rows inside the interleaved block layout."""
    return np.arange(n) * (d + 1)


def interp_vjp(x, field, upstream, value_only=False):
    """Backward pass of ``assemble_interp`` with respect to (z, T).

    Parameters
    ----------
    x : (n, d) ndarray
    field : InterpField
    upstream : ndarray
        Gradient of the objective with respect to the assembled block
        matrix; shape (n*(d+1), m) in the interleaved layout, or (n, m)
        when ``value_only``.
    value_only : bool
        Matches the forward assembly mode.

    Returns
    -------
    (z_bar, t_bar) : ((m, d), (m, d)) ndarrays
        Gradients with respect to the point locations and the positive
        temperatures. For a shared-temperature field the caller sums
        ``t_bar`` over its first axis.

    Notes
    -----
    The chain runs through u_k = x/T_k - z_k, r_k = |u_k|, the softmax of
    a = -r, and the regularized distance gradients
    g_k = -u_k / (T_k (r_k + eps)). All contractions are batched over the
    data rows in chunks to bound the (chunk, m, d) temporaries.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    m = field.m
    t = field.temperatures
    eps = field.eps
    z_bar = np.zeros((m, d))
    t_bar = np.zeros((m, d))
    up = upstream.reshape(n, 1 if value_only else d + 1, m)
    chunk = max(1, _CHUNK_TARGET // max(m * d, 1))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        xb = x[lo:hi]
        u, r = _distances(xb, field)
        sigma = _softmax(-r)
        rsafe = np.where(r > 0, r, 1.0)
        sig_bar = up[lo:hi, 0, :].copy()  # (b, m)

        if not value_only:
            denom = t[None, :, :] * (r[:, :, None] + eps)
            g = -u / denom
            gbar = np.einsum("nm,nmd->nd", sigma, g)
            pbar = np.swapaxes(up[lo:hi, 1:, :], 1, 2)  # (b, m, d)
            # gradient rows: P[:, j] = sigma_j (g_j - gbar)
            pbar_sig = np.einsum("nm,nmd->nd", sigma, pbar)
            sig_bar += (
                np.einsum("nmd,nmd->nm", g - gbar[:, None, :], pbar)
                - np.einsum("nmd,nd->nm", g, pbar_sig)
            )
            g_up = sigma[:, :, None] * (pbar - pbar_sig[:, None, :])

        # softmax backward onto a = -r
        a_bar = sigma * (sig_bar - np.sum(sigma * sig_bar, axis=1, keepdims=True))
        r_bar = -a_bar
        u_bar = np.zeros_like(u)

        if not value_only:
            # g = -u / (T (r + eps)) backward
            u_bar = -g_up / denom
            r_bar = r_bar + np.einsum(
                "nmd,nmd->nm", g_up, u / (denom * (r[:, :, None] + eps))
            )
            t_bar += np.einsum("nmd,nmd->md", g_up, u / (denom * t[None, :, :]))

        # r = |u| backward, then u = x/T - z
        u_bar = u_bar + (r_bar / rsafe)[:, :, None] * u
        z_bar -= u_bar.sum(axis=0)
        t_bar -= np.einsum("nmd,nd->md", u_bar, xb) / t**2
    return z_bar, t_bar
