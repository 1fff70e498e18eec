"""Interpolated GP-with-derivatives model: objective, fit, predict.

The approximate joint kernel over values and gradients is

    K_tilde = B K_zz B^T,      B = assemble_interp(X, field)

so a minibatch covariance factors as F F^T with F = B L and K_zz = L L^T.
The marginal log likelihood of a batch is computed through the Woodbury
identity and the determinant lemma on the m x m capacitance matrix, never
materializing the b(d+1) square covariance. When factorization fails, a
CG-based pseudoloss whose gradient estimates the MLL gradient takes over.

Gradients with respect to every hyperparameter are hand-derived reverse
passes through this computation (see the *_vjp helpers here and in
``kernels`` / ``interp``) and are validated against finite differences in
the test suite.
"""

import numpy as np

from . import interp as interp_mod
from . import reparam
from .exact import LOG_2PI, GpwdNoise
from .interp import InterpField, assemble_interp, interp_vjp, softmax_weights
from .kernels import KernelParams, kernel_matrix, kernel_matrix_vjp
from .linalg import (
    FactorizationFailed,
    LinearOperator,
    NotConverged,
    RankDeficient,
    cg_solve,
    cholesky,
    cholesky_safe,
    pivoted_cholesky_precond,
    qr_thin,
    solve_lower,
    solve_upper,
)

DEFAULT_NUM_PROBES = 10
FIT_RESIDUAL_TOL = 1e-5


class Unrecoverable(Exception):
    """Both the factored objective and the pseudoloss fallback failed."""


class DsoftkiParams:
    """Complete hyperparameter set: kernel, interpolation field, noises.

    ``value_only`` switches off the gradient rows and the gradient noise,
    which recovers the value-only interpolated GP.
    """

    def __init__(self, kparams, field, noise, value_only=False):
        self.kparams = kparams
        self.field = field
        self.noise = noise
        self.value_only = bool(value_only)
        if field.z.shape[1] != kparams.dim:
            raise ValueError("interpolation field and kernel dims differ")

    @property
    def dim(self):
        return self.kparams.dim

    @property
    def m(self):
        return self.field.m

    def block_rows(self):
        """Rows contributed per data point."""
        return 1 if self.value_only else self.dim + 1

    def noise_diagonal(self, n):
        if self.value_only:
            return np.full(n, self.noise.value_var)
        return self.noise.diagonal(n, self.dim)


class LowRankGaussian:
    """Zero-mean Gaussian with covariance F F^T + diag(noise_diag)."""

    def __init__(self, factor, noise_diag):
        self.factor = np.asarray(factor)
        self.noise_diag = np.asarray(noise_diag)
        if np.any(self.noise_diag <= 0):
            raise ValueError("noise diagonal must be strictly positive")


class FactorCache:
    """Low-rank covariance factor plus the intermediates that built it."""

    def __init__(self, factor, interp_block, kzz, chol):
        self.factor = factor
        self.interp_block = interp_block
        self.kzz = kzz
        self.chol = chol


def build_factor(xb, params, dtype=np.float64):
    """Factor F = B L with F F^T equal to the interpolated batch kernel.

    Raises FactorizationFailed when K_zz resists the whole jitter/precision
    schedule; callers fall back to the pseudoloss in that case.
    """
    kzz = kernel_matrix(params.field.z, params.field.z, params.kparams, dtype=dtype)
    if dtype == np.float64:
        chol_fac = cholesky_safe(kzz)
        ell = chol_fac.L
    else:
        chol_fac = None
        ell = cholesky(kzz)
    block = assemble_interp(xb, params.field, value_only=params.value_only, dtype=dtype)
    return FactorCache(block @ ell, block, kzz, chol_fac)


def lowrank_logpdf(gaussian, ytil):
    """Log density of ytil under the low-rank-plus-diagonal Gaussian.

    Works entirely through the m x m capacitance matrix
    I + F^T Lambda^{-1} F; cost O(m^2 p) for a p-vector of observations.
    """
    value, _ = _lowrank_logpdf_cache(gaussian.factor, gaussian.noise_diag, ytil)
    return value


def _lowrank_logpdf_cache(factor, noise_diag, ytil):
    dtype = factor.dtype.type
    ytil = np.asarray(ytil, dtype=dtype)
    noise_diag = np.asarray(noise_diag, dtype=dtype)
    p = ytil.shape[0]
    wh = factor / np.sqrt(noise_diag)[:, None]
    cap = wh.T @ wh
    cap[np.diag_indices_from(cap)] += dtype(1.0)
    cap_chol = cholesky(cap)  # FactorizationFailed from here triggers fallback
    yw = ytil / noise_diag
    v = factor.T @ yw
    s = solve_upper(cap_chol.T, solve_lower(cap_chol, v))
    quad = ytil @ yw - v @ s
    logdet = np.sum(np.log(noise_diag)) + 2.0 * np.sum(np.log(np.diag(cap_chol)))
    value = -0.5 * (quad + logdet + p * dtype(LOG_2PI))
    cache = (cap_chol, yw, s)
    return value, cache


def _lowrank_logpdf_grads(factor, noise_diag, ytil):
    """Objective value plus gradients with respect to F and the noise diagonal.

    Uses d logpdf / dD = (alpha alpha^T - D^{-1}) / 2 for D = F F^T + diag,
    with D^{-1} applied through Woodbury.
    """
    value, (cap_chol, yw, s) = _lowrank_logpdf_cache(factor, noise_diag, ytil)
    alpha = yw - (factor @ s) / noise_diag
    t = factor.T @ alpha
    # D^{-1} F = Lambda^{-1} F C^{-1}
    x = solve_upper(cap_chol.T, solve_lower(cap_chol, factor.T))
    g_factor = alpha[:, None] * t[None, :] - x.T / noise_diag[:, None]
    wn = factor / noise_diag[:, None]
    half = solve_lower(cap_chol, wn.T)
    dinv_diag = 1.0 / noise_diag - np.sum(half * half, axis=0)
    noise_bar = 0.5 * (alpha**2 - dinv_diag)
    return value, g_factor, noise_bar


def _chol_backward(ell, ell_bar):
    """Reverse-mode map from a Cholesky-factor gradient to the matrix gradient."""
    phi = np.tril(ell.T @ ell_bar)
    phi[np.diag_indices_from(phi)] *= 0.5
    tmp = solve_upper(ell.T, phi)
    kbar = solve_upper(ell.T, tmp.T).T
    return 0.5 * (kbar + kbar.T)


def _noise_vjp(params, n, lam_bar):
    """Route the noise-diagonal gradient onto the two variance parameters."""
    if params.value_only:
        value_bar = float(np.sum(lam_bar))
        grad_bar = 0.0
    else:
        d = params.dim
        per_point = lam_bar.reshape(n, d + 1)
        value_bar = float(np.sum(per_point[:, 0]))
        grad_bar = float(np.sum(per_point[:, 1:]))
    return value_bar, grad_bar


def _assemble_param_grads(params, xb, sigma_bar, kzz_bar, value_noise_bar, grad_noise_bar):
    """Chain the matrix-level gradients down to unconstrained parameters."""
    z_bar_k, ell_bar, scale_bar = kernel_matrix_vjp(
        params.field.z, params.kparams, kzz_bar
    )
    z_bar_i, t_bar = interp_vjp(
        xb, params.field, sigma_bar, value_only=params.value_only
    )
    grads = {
        "raw_lengthscales": ell_bar
        * reparam.softplus_grad(params.kparams.raw_lengthscales),
        "raw_scale": scale_bar
        * float(reparam.softplus_grad(np.float64(params.kparams.raw_scale))),
        "z": z_bar_k + z_bar_i,
        "raw_value_var": value_noise_bar
        * float(reparam.softplus_grad(np.float64(params.noise.raw_value_var))),
        "raw_grad_var": grad_noise_bar
        * float(reparam.softplus_grad(np.float64(params.noise.raw_grad_var))),
    }
    if params.field.shared_temperature:
        grads["raw_t"] = t_bar.sum(axis=0) * reparam.softplus_grad(params.field.raw_t)
    else:
        grads["raw_t"] = t_bar * reparam.softplus_grad(params.field.raw_t)
    if params.value_only:
        grads["raw_grad_var"] = 0.0
    return grads


def batch_labels(y, dy=None):
    """Interleave values and gradients into the flat label vector."""
    y = np.asarray(y, dtype=np.float64)
    if dy is None:
        return y.copy()
    dy = np.asarray(dy, dtype=np.float64)
    return np.concatenate([y[:, None], dy], axis=1).ravel()


def covariance_operator(xb, params):
    """Lazy operator for the interpolated batch kernel (no noise).

    Never forms the p x p matrix; matvecs cost O(p m).
    """
    block = assemble_interp(xb, params.field, value_only=params.value_only)
    kzz = kernel_matrix(params.field.z, params.field.z, params.kparams)
    bk = block @ kzz
    diag = np.sum(bk * block, axis=1)

    def matvec(v):
        return bk @ (block.T @ v)

    return LinearOperator(block.shape[0], matvec, diag=diag), block, kzz


def hutchinson_pseudoloss(op, ytil, num_probes=DEFAULT_NUM_PROBES, seed=0,
                          noise_diag=None, cg_tol=1e-5, max_iter=1000):
    """CG-based surrogate objective used when factorization fails.

    Solves D u_0 = ytil and D u_j = z_j for unit-norm Gaussian probes z_j,
    where D adds ``noise_diag`` to the covariance operator ``op``, and
    returns -(u_0^T D u_0 + mean_j u_j^T D z_j) / 2. CG is preconditioned
    by a rank-10 pivoted Cholesky of the covariance part.
    """
    value, _ = _hutchinson_solves(
        op, ytil, num_probes, seed, noise_diag, cg_tol, max_iter
    )
    return value


def _hutchinson_solves(op, ytil, num_probes, seed, noise_diag, cg_tol, max_iter):
    ytil = np.asarray(ytil, dtype=np.float64)
    p = ytil.shape[0]
    if noise_diag is None:
        noise_diag = np.ones(p)
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    probes = rng.standard_normal((num_probes, p))
    probes /= np.linalg.norm(probes, axis=1, keepdims=True)

    def matvec(v):
        return op.matvec(v) + noise_diag * v

    full = LinearOperator(p, matvec)
    precond = pivoted_cholesky_precond(op, rank=10, noise_diag=noise_diag)
    u0 = cg_solve(full, ytil, precond=precond, tol=cg_tol, max_iter=max_iter)
    us = np.stack(
        [cg_solve(full, z, precond=precond, tol=cg_tol, max_iter=max_iter) for z in probes]
    ) if num_probes else np.zeros((0, p))
    quad = u0 @ matvec(u0)
    trace_terms = np.array([us[j] @ matvec(probes[j]) for j in range(num_probes)])
    value = -0.5 * (quad + (trace_terms.mean() if num_probes else 0.0))
    return float(value), (u0, us, probes)


def _pseudoloss_grads(xb, params, ytil, num_probes, seed, cg_tol=1e-5, max_iter=1000):
    """Pseudoloss value and an MLL-gradient estimate on the fallback path.

    The CG solutions are held constant; the probe (trace) term is rescaled
    by p because unit-norm probes have second moment I/p. The resulting
    direction estimates the exact MLL gradient without requiring any
    factorization of K_zz.
    """
    op, block, kzz = covariance_operator(xb, params)
    p = block.shape[0]
    noise_diag = params.noise_diagonal(xb.shape[0])
    value, (u0, us, probes) = _hutchinson_solves(
        op, ytil, num_probes, seed, noise_diag, cg_tol, max_iter
    )
    ell = num_probes
    # d objective / dD contracted as the symmetric low-rank matrix
    #   M = u0 u0^T / 2 - (p / 2l) sum_j sym(u_j z_j^T)
    bk = block @ kzz
    u0_bk = u0 @ bk
    sigma_bar = np.outer(u0, u0_bk)
    w_u = us @ block if ell else np.zeros((0, block.shape[1]))
    w_z = probes @ block if ell else np.zeros((0, block.shape[1]))
    if ell:
        scale = p / (2.0 * ell)
        sigma_bar -= scale * (us.T @ (w_z @ kzz) + probes.T @ (w_u @ kzz))
    u0_b = u0 @ block
    kzz_bar = 0.5 * np.outer(u0_b, u0_b)
    if ell:
        cross = w_u.T @ w_z
        kzz_bar -= (p / (4.0 * ell)) * (cross + cross.T)
    lam_bar = 0.5 * u0**2
    if ell:
        lam_bar -= (p / (2.0 * ell)) * np.sum(us * probes, axis=0)
    value_noise_bar, grad_noise_bar = _noise_vjp(params, xb.shape[0], lam_bar)
    grads = _assemble_param_grads(
        params, xb, sigma_bar, kzz_bar, value_noise_bar, grad_noise_bar
    )
    return value, grads


def objective_value(xb, ytil, params, dtype=np.float64):
    """Factored-path objective value only (used by finite-difference checks)."""
    xb = np.atleast_2d(np.asarray(xb, dtype=dtype))
    cache = build_factor(xb, params, dtype=dtype)
    noise_diag = params.noise_diagonal(xb.shape[0]).astype(dtype)
    value, _ = _lowrank_logpdf_cache(cache.factor, noise_diag, ytil)
    return value


def stabilized_objective(xb, ytil, params, num_probes=DEFAULT_NUM_PROBES,
                         probe_seed=0):
    """Batch objective with gradients, falling back to the pseudoloss.

    Returns (value, grads, info) where grads maps parameter names to
    gradients with respect to the unconstrained parametrization and info
    records fallback and jitter telemetry.
    """
    xb = np.atleast_2d(np.asarray(xb, dtype=np.float64))
    ytil = np.asarray(ytil, dtype=np.float64)
    info = {"fallback": False, "jitter": 0.0, "precision_escalated": False}
    try:
        cache = build_factor(xb, params)
        info["jitter"] = cache.chol.jitter_used
        info["precision_escalated"] = cache.chol.precision_escalated
        noise_diag = params.noise_diagonal(xb.shape[0])
        value, g_factor, lam_bar = _lowrank_logpdf_grads(
            cache.factor, noise_diag, ytil
        )
        sigma_bar = g_factor @ cache.chol.L.T
        l_bar = cache.interp_block.T @ g_factor
        kzz_bar = _chol_backward(cache.chol.L, l_bar)
        value_noise_bar, grad_noise_bar = _noise_vjp(params, xb.shape[0], lam_bar)
        grads = _assemble_param_grads(
            params, xb, sigma_bar, kzz_bar, value_noise_bar, grad_noise_bar
        )
        return value, grads, info
    except FactorizationFailed:
        info["fallback"] = True
    try:
        value, grads = _pseudoloss_grads(xb, params, ytil, num_probes, probe_seed)
        return value, grads, info
    except (FactorizationFailed, NotConverged, RankDeficient) as exc:
        raise Unrecoverable(f"both objective paths failed: {exc}") from exc


class FittedModel:
    """Frozen hyperparameters with posterior coefficients and solve factor."""

    def __init__(self, alpha, params, norm=None, r_factor=None, fit_residual=0.0):
        self.alpha = np.asarray(alpha, dtype=np.float64)
        self.params = params
        self.norm = norm
        self.r_factor = r_factor
        self.fit_residual = float(fit_residual)


def fit(x, ytil, params, norm=None, block_size=1024):
    """Posterior coefficient solve via streaming QR over row blocks.

    Solves (K_zz + A^T Lambda^{-1} A) alpha = A^T Lambda^{-1} ytil with
    A = B K_zz, by QR-factorizing the stacked tall matrix
    [Lambda^{-1/2} A; L^T] one block of data points at a time, so only
    O(m^2) state persists between blocks.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ytil = np.asarray(ytil, dtype=np.float64)
    n, d = x.shape
    rows_per_point = params.block_rows()
    if ytil.shape[0] != n * rows_per_point:
        raise ValueError("label vector does not match the data shape")
    kzz = kernel_matrix(params.field.z, params.field.z, params.kparams)
    chol_fac = cholesky_safe(kzz)
    _, r_cur = qr_thin(chol_fac.L.T)
    rhs = np.zeros(params.m)
    block_pts = max(1, int(block_size))
    for lo in range(0, n, block_pts):
        hi = min(lo + block_pts, n)
        blk = assemble_interp(x[lo:hi], params.field, value_only=params.value_only)
        khat = blk @ kzz
        lam = params.noise_diagonal(hi - lo)
        yb = ytil[lo * rows_per_point : hi * rows_per_point]
        rhs += khat.T @ (yb / lam)
        scaled = khat / np.sqrt(lam)[:, None]
        _, r_cur = qr_thin(np.vstack([r_cur, scaled]))
    alpha = solve_upper(r_cur, solve_lower(r_cur.T, rhs))
    # iterative refinement against C = R^T R keeps the residual tight
    residual = np.inf
    rhs_norm = np.linalg.norm(rhs)
    for _ in range(3):
        resid_vec = rhs - r_cur.T @ (r_cur @ alpha)
        residual = np.linalg.norm(resid_vec) / max(rhs_norm, 1e-300)
        if residual <= FIT_RESIDUAL_TOL:
            break
        alpha = alpha + solve_upper(r_cur, solve_lower(r_cur.T, resid_vec))
    else:
        resid_vec = rhs - r_cur.T @ (r_cur @ alpha)
        residual = np.linalg.norm(resid_vec) / max(rhs_norm, 1e-300)
        if residual > FIT_RESIDUAL_TOL:
            raise RankDeficient(
                f"posterior solve residual {residual:.3e} exceeds {FIT_RESIDUAL_TOL}"
            )
    return FittedModel(alpha, params, norm=norm, r_factor=r_cur, fit_residual=residual)


def predict(xstar, model, want_variance=False, full_covariance=False,
            include_noise=False):
    """Posterior values, gradients and (optionally) variances at test points.

    Test inputs are in raw units when the model carries a normalization
    transform; outputs are mapped back to raw units, with the gradient
    channel chain-ruled through the input map.

    Returns (values, gradients, variances) where variances has the
    interleaved n*(d+1) layout (None unless requested). With
    ``full_covariance`` the full posterior covariance is returned instead
    of the diagonal.
    """
    params = model.params
    xstar = np.atleast_2d(np.asarray(xstar, dtype=np.float64))
    nstar, d = xstar.shape
    xs = xstar if model.norm is None else model.norm.transform_inputs(xstar)
    # prediction always uses the full value+gradient blocks; in value-only
    # mode the gradient rows are the analytic gradient of the mean
    block = assemble_interp(xs, params.field, value_only=False)
    kzz = kernel_matrix(params.field.z, params.field.z, params.kparams)
    khat = block @ kzz
    mean = (khat @ model.alpha).reshape(nstar, d + 1)
    values = mean[:, 0]
    gradients = mean[:, 1:]
    if model.norm is not None:
        values = model.norm.inverse_values(values)
        gradients = model.norm.inverse_gradients(gradients)
    variances = None
    if want_variance or full_covariance:
        if model.r_factor is None:
            raise ValueError("model was fitted without a solve factor")
        half = solve_lower(model.r_factor.T, khat.T)
        if full_covariance:
            cov = half.T @ half
            if model.norm is not None:
                scale = model.norm.output_scales(nstar)
                cov = cov * scale[:, None] * scale[None, :]
            if include_noise:
                cov = cov + np.diag(params.noise.diagonal(nstar, d))
            return values, gradients, 0.5 * (cov + cov.T)
        variances = np.sum(half * half, axis=0)
        if model.norm is not None:
            variances = variances * model.norm.output_scales(nstar) ** 2
        if include_noise:
            variances = variances + params.noise.diagonal(nstar, d)
    return values, gradients, variances


def prior_variance(xstar, params):
    """Diagonal of the interpolated prior covariance at test points."""
    xstar = np.atleast_2d(np.asarray(xstar, dtype=np.float64))
    block = assemble_interp(xstar, params.field, value_only=False)
    kzz = kernel_matrix(params.field.z, params.field.z, params.kparams)
    return np.sum((block @ kzz) * block, axis=1)


def omega_diagnostic(x, ytil, params):
    """Noise-weighted aggregation of labels onto interpolation points.

    omega_j = sum_i (sigma_ij y_i / beta_v^2 + dsigma_ij . dy_i / beta_g^2),
    which satisfies K_zz omega = A^T Lambda^{-1} ytil for A = B K_zz.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    block = assemble_interp(x, params.field, value_only=params.value_only)
    lam = params.noise_diagonal(n)
    return block.T @ (np.asarray(ytil, dtype=np.float64) / lam)


MODEL_FORMAT_VERSION = 1


def save_model(path, model):
    """Write a fitted model as a self-describing npz archive (bit exact)."""
    params = model.params
    field = params.field
    payload = {
        "format_version": np.array(MODEL_FORMAT_VERSION),
        "raw_lengthscales": params.kparams.raw_lengthscales,
        "raw_scale": np.array(params.kparams.raw_scale),
        "z": field.z,
        "raw_t": field.raw_t,
        "eps": np.array(field.eps),
        "shared_temperature": np.array(field.shared_temperature),
        "value_only": np.array(params.value_only),
        "raw_value_var": np.array(params.noise.raw_value_var),
        "raw_grad_var": np.array(params.noise.raw_grad_var),
        "alpha": model.alpha,
        "fit_residual": np.array(model.fit_residual),
    }
    if model.r_factor is not None:
        payload["r_factor"] = model.r_factor
    if model.norm is not None:
        payload.update(model.norm.to_arrays())
    with open(path, "wb") as fh:  # keep the exact path, no .npz suffixing
        np.savez(fh, **payload)


def load_model(path):
    """Inverse of save_model; raises ValueError on version mismatch."""
    from .datasets import NormTransform

    with np.load(path, allow_pickle=False) as archive:
        data = {key: archive[key] for key in archive.files}
    version = int(data["format_version"])
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(
            f"model archive version {version} unsupported "
            f"(expected {MODEL_FORMAT_VERSION})"
        )
    kparams = KernelParams(data["raw_lengthscales"], float(data["raw_scale"]))
    field = InterpField(
        data["z"],
        data["raw_t"],
        eps=float(data["eps"]),
        shared_temperature=bool(data["shared_temperature"]),
    )
    noise = GpwdNoise(float(data["raw_value_var"]), float(data["raw_grad_var"]))
    params = DsoftkiParams(kparams, field, noise, value_only=bool(data["value_only"]))
    norm = NormTransform.from_arrays(data)
    return FittedModel(
        data["alpha"],
        params,
        norm=norm,
        r_factor=data.get("r_factor"),
        fit_residual=float(data["fit_residual"]),
    )
