"""Dense and iterative linear algebra used throughout the package.

Everything here operates on plain numpy arrays. The safeguarded Cholesky
retries a fixed jitter schedule and, if needed, escalates to extended
precision (80-bit long double on x86), for which small hand-rolled
factorization/solve routines are provided since LAPACK only handles
float32/float64.
"""

import numpy as np
import scipy.linalg


DEFAULT_JITTER_SCHEDULE = (0.0, 1e-8, 1e-6, 1e-4)


class FactorizationFailed(Exception):
    """Cholesky factorization failed for every jitter/precision attempt."""


class RankDeficient(Exception):
    """QR factor has a (numerically) zero diagonal entry."""


class NotConverged(Exception):
    """Iterative solver hit its iteration cap; carries the last residual."""

    def __init__(self, residual, iterations):
        self.residual = float(residual)
        self.iterations = int(iterations)
        super().__init__(
            f"CG did not converge in {iterations} iterations "
            f"(relative residual {residual:.3e})"
        )


class SpdFactor:
    """Lower-triangular Cholesky factor with the jitter that made it work.

    Attributes
    ----------
    L : (m, m) ndarray
        Lower triangular, strictly positive diagonal. ``L @ L.T``
        reconstructs the input plus ``jitter_used`` on the diagonal.
    jitter_used : float
    precision_escalated : bool
        True if the factorization only succeeded in extended precision.
    """

    def __init__(self, L, jitter_used, precision_escalated):
        self.L = L
        self.jitter_used = float(jitter_used)
        self.precision_escalated = bool(precision_escalated)


def _chol_longdouble(a):
    """Column-blocked Cholesky in long double; returns None on failure."""
    a = np.array(a, dtype=np.longdouble)
    m = a.shape[0]
    for j in range(m):
        pivot = a[j, j]
        if not pivot > 0 or not np.isfinite(pivot):
            return None
        ljj = np.sqrt(pivot)
        a[j, j] = ljj
        if j + 1 < m:
            a[j + 1:, j] /= ljj
            a[j + 1:, j + 1:] -= np.outer(a[j + 1:, j], a[j + 1:, j])
    return np.tril(a)


def solve_lower(L, b):
    """Solve L x = b for lower-triangular L; supports long double."""
    if L.dtype == np.longdouble or np.asarray(b).dtype == np.longdouble:
        L = np.asarray(L, dtype=np.longdouble)
        b = np.asarray(b, dtype=np.longdouble)
        x = np.array(b, copy=True)
        vec = x.ndim == 1
        if vec:
            x = x[:, None]
        for i in range(L.shape[0]):
            x[i] -= L[i, :i] @ x[:i]
            x[i] /= L[i, i]
        return x[:, 0] if vec else x
    return scipy.linalg.solve_triangular(L, b, lower=True)


def solve_upper(U, b):
    """Solve U x = b for upper-triangular U; supports long double."""
    if U.dtype == np.longdouble or np.asarray(b).dtype == np.longdouble:
        U = np.asarray(U, dtype=np.longdouble)
        b = np.asarray(b, dtype=np.longdouble)
        x = np.array(b, copy=True)
        vec = x.ndim == 1
        if vec:
            x = x[:, None]
        for i in range(U.shape[0] - 1, -1, -1):
            x[i] -= U[i, i + 1:] @ x[i + 1:]
            x[i] /= U[i, i]
        return x[:, 0] if vec else x
    return scipy.linalg.solve_triangular(U, b, lower=False)


def cholesky(a):
    """Plain lower Cholesky dispatching on dtype (LAPACK or long double).

    Raises FactorizationFailed instead of LinAlgError.
    """
    if a.dtype == np.longdouble:
        L = _chol_longdouble(a)
        if L is None:
            raise FactorizationFailed("long-double Cholesky failed")
        return L
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise FactorizationFailed(str(exc)) from exc


def cholesky_safe(a, jitter_schedule=DEFAULT_JITTER_SCHEDULE):
    """Cholesky with a jitter schedule and extended-precision retries.

    Each jitter value is tried in working precision (float64) first and
    then in long double; the first success wins. The long-double factor is
    cast back to float64.

    Parameters
    ----------
    a : (m, m) ndarray
        Symmetric matrix (relative asymmetry above 1e-10 is rejected).
    jitter_schedule : sequence of float
        Nonnegative diagonal inflations to attempt, in order.

    Returns
    -------
    SpdFactor

    Raises
    ------
    FactorizationFailed
        If every (jitter, precision) combination fails.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = np.max(np.abs(a))
    if scale > 0 and np.max(np.abs(a - a.T)) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric to 1e-10 relative tolerance")
    eye = np.eye(a.shape[0])
    for jitter in jitter_schedule:
        if jitter < 0:
            raise ValueError("jitter values must be nonnegative")
        shifted = a + jitter * eye
        try:
            return SpdFactor(np.linalg.cholesky(shifted), jitter, False)
        except np.linalg.LinAlgError:
            pass
        L = _chol_longdouble(shifted)
        if L is not None:
            return SpdFactor(L.astype(np.float64), jitter, True)
    raise FactorizationFailed(
        f"Cholesky failed for all jitters {tuple(jitter_schedule)}"
    )


def qr_thin(a):
    """Thin QR with nonnegative R diagonal.

    Parameters
    ----------
    a : (p, m) ndarray, p >= m

    Returns
    -------
    (Q, R) : ((p, m), (m, m)) ndarrays
        Q has orthonormal columns, R is upper triangular with
        nonnegative diagonal.

    Raises
    ------
    RankDeficient
        If any |R_ii| < 1e-12 * max_j |R_jj|.
    """
    a = np.asarray(a, dtype=np.float64)
    p, m = a.shape
    if p < m:
        raise ValueError(f"need p >= m, got shape {a.shape}")
    q, r = np.linalg.qr(a, mode="reduced")
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs[None, :]
    r = r * signs[:, None]
    diag = np.abs(np.diag(r))
    if np.any(diag < 1e-12 * diag.max(initial=0.0)):
        raise RankDeficient("R diagonal entry below 1e-12 of the largest")
    return q, r


class LinearOperator:
    """Symmetric square operator given by a matvec, with optional diagonal.

    ``matvec`` must accept a 1-D vector (and may accept a 2-D block of
    column vectors). ``diag`` is either the diagonal as an array or a
    callable producing it; the pivoted-Cholesky preconditioner needs it.
    """

    def __init__(self, n, matvec, diag=None):
        self.shape = (int(n), int(n))
        self._matvec = matvec
        self._diag = diag

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=np.float64)
        return cls(a.shape[0], lambda v: a @ v, diag=np.diag(a).copy())

    def matvec(self, v):
        return self._matvec(v)

    def diag(self):
        if self._diag is None:
            raise ValueError("operator was built without diagonal access")
        d = self._diag() if callable(self._diag) else self._diag
        return np.asarray(d, dtype=np.float64)

    def column(self, i):
        e = np.zeros(self.shape[1])
        e[i] = 1.0
        return self.matvec(e)


class Preconditioner:
    """Applies an SPD approximation of the operator inverse.

    Wraps a low-rank factor P and a positive diagonal n, applying
    (P P^T + diag(n))^{-1} through the Woodbury identity:

        (N + P P^T)^{-1} v = N^{-1} v - N^{-1} P (I + P^T N^{-1} P)^{-1} P^T N^{-1} v
    """

    def __init__(self, factor, noise_diag):
        self.factor = np.asarray(factor, dtype=np.float64)
        self.noise_diag = np.asarray(noise_diag, dtype=np.float64)
        if np.any(self.noise_diag <= 0):
            raise ValueError("noise diagonal must be strictly positive")
        self.rank = self.factor.shape[1]
        if self.rank:
            pn = self.factor / self.noise_diag[:, None]
            small = np.eye(self.rank) + self.factor.T @ pn
            self._small_chol = cholesky(small)
            self._pn = pn

    def apply(self, v):
        vn = v / self.noise_diag if v.ndim == 1 else v / self.noise_diag[:, None]
        if not self.rank:
            return vn
        t = self._pn.T @ v
        t = solve_upper(self._small_chol.T, solve_lower(self._small_chol, t))
        return vn - self._pn @ t


def pivoted_cholesky_precond(op, rank=10, noise_diag=None):
    """Greedy pivoted partial Cholesky of an operator, as a preconditioner.

    Selects pivots by the largest residual diagonal entry; truncates early
    if the residual diagonal is exhausted. The resulting rank-``rank``
    factor P is combined with ``noise_diag`` into a Woodbury-applied
    preconditioner for P P^T + diag(noise_diag).
    """
    n = op.shape[0]
    if noise_diag is None:
        noise_diag = np.ones(n)
    rank = min(int(rank), n)
    d = op.diag().copy()
    cols = np.zeros((n, rank))
    order = []
    for k in range(rank):
        i = int(np.argmax(d))
        if d[i] <= 0:
            break
        col = op.column(i)
        if order:
            col = col - cols[:, :k] @ cols[i, :k]
        piv = np.sqrt(d[i])
        cols[:, k] = col / piv
        cols[i, k] = piv  # exact by construction; avoids round-off drift
        d -= cols[:, k] ** 2
        d[i] = 0.0
        order.append(i)
    return Preconditioner(cols[:, : len(order)], noise_diag)


def cg_solve(op, b, precond=None, tol=1e-5, max_iter=1000):
    """Preconditioned conjugate gradients for SPD systems.

    Parameters
    ----------
    op : LinearOperator
        Symmetric positive definite.
    b : (n,) ndarray
    precond : Preconditioner or None
        None means the identity.
    tol : float
        Convergence is declared when ||op(u) - b|| / ||b|| <= tol.
    max_iter : int

    Returns
    -------
    (n,) ndarray

    Raises
    ------
    NotConverged
        After max_iter iterations without meeting the tolerance.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b)
    x = np.zeros_like(b)
    r = b.copy()
    z = precond.apply(r) if precond is not None else r
    p = z.copy()
    rz = r @ z
    rel = 1.0
    for it in range(1, max_iter + 1):
        ap = op.matvec(p)
        alpha = rz / (p @ ap)
        x = x + alpha * p
        r = r - alpha * ap
        rel = np.linalg.norm(r) / bnorm
        if rel <= tol:
            return x
        z = precond.apply(r) if precond is not None else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NotConverged(rel, max_iter)
