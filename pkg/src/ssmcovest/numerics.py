"""Shared numerical primitives.

Symmetric positive-definite matrix handling, multivariate Gaussian sampling
and log-density evaluation, Frobenius matrix metrics, and reproducible
splittable random streams. Everything here is pure: outputs depend only on
the explicit inputs, and :class:`SpdMatrix` is immutable after construction.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite, ZeroNorm

LOG_2PI = np.log(2.0 * np.pi)


class SpdMatrix:
    """A symmetric positive-definite matrix with a cached Cholesky factor.

    Construct through :func:`spd_from_matrix`; the constructor assumes its
    input is already symmetric and factorizable and raises
    :class:`NotPositiveDefinite` otherwise.

    Attributes
    ----------
    dim : int
        Matrix order.
    values : ndarray, shape (dim, dim)
        The dense symmetric matrix. Treat as read-only.
    chol : ndarray, shape (dim, dim)
        Lower-triangular Cholesky factor, ``values = chol @ chol.T``.
    """

    __slots__ = ("dim", "values", "chol", "_inv")

    def __init__(self, values):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise DimensionMismatch(f"expected a square matrix, got shape {values.shape}")
        try:
            chol = np.linalg.cholesky(values)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
        if not np.all(np.isfinite(chol)):
            raise NotPositiveDefinite("non-finite Cholesky factor")
        object.__setattr__(self, "dim", values.shape[0])
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "_inv", None)

    def __setattr__(self, name, value):
        raise AttributeError("SpdMatrix is immutable")

    def __repr__(self):
        return f"SpdMatrix(dim={self.dim})"

    @property
    def log_det(self):
        """Log-determinant computed from the Cholesky diagonal."""
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @property
    def inv(self):
        """Dense inverse, computed once on first use and cached."""
        if self._inv is None:
            eye = np.eye(self.dim)
            object.__setattr__(self, "_inv", cho_solve((self.chol, True), eye))
        return self._inv

    def solve(self, b):
        """Solve ``values @ x = b`` via the cached factor."""
        return cho_solve((self.chol, True), np.asarray(b, dtype=float))

    def maha_sq(self, diffs):
        """Squared Mahalanobis norms ``d^T values^{-1} d`` for rows of `diffs`.

        Parameters
        ----------
        diffs : ndarray, shape (..., dim)
            Stack of difference vectors.

        Returns
        -------
        ndarray, shape (...,)
        """
        diffs = np.asarray(diffs, dtype=float)
        if diffs.shape[-1] != self.dim:
            raise DimensionMismatch(
                f"vectors of length {diffs.shape[-1]} against a {self.dim}-dim matrix"
            )
        flat = diffs.reshape(-1, self.dim)
        half = solve_triangular(self.chol, flat.T, lower=True)
        return np.sum(half * half, axis=0).reshape(diffs.shape[:-1])


def spd_from_matrix(m, jitter=0.0, rescue=False):
    """Build an :class:`SpdMatrix` from a square matrix.

    The input is symmetrized as ``(m + m.T) / 2`` and ``jitter * I`` is added
    before factorization.

    Parameters
    ----------
    m : array_like, shape (n, n)
    jitter : float
        Nonnegative diagonal inflation.
    rescue : bool
        If True and the factorization fails, retry once with an extra jitter
        of ``1e-10 * max(diagonal)``. Meant for iterative covariance updates
        that can brush the positive-definite boundary with finite ensembles;
        leave False to surface genuine rank deficiency.

    Raises
    ------
    NotPositiveDefinite
        If factorization fails (after the rescue retry, when enabled).
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    sym = 0.5 * (m + m.T)
    if jitter > 0:
        sym = sym + jitter * np.eye(sym.shape[0])
    try:
        return SpdMatrix(sym)
    except NotPositiveDefinite:
        if not rescue:
            raise
        extra = 1e-10 * max(float(np.max(np.diag(sym))), 0.0)
        if extra <= 0:
            raise
        return SpdMatrix(sym + extra * np.eye(sym.shape[0]))


def spd_identity(dim, scale=1.0):
    """Scaled identity as an :class:`SpdMatrix`."""
    return SpdMatrix(scale * np.eye(dim))


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Backed by the counter-based Philox bit generator, so identical keys give
    identical draw sequences across runs and platforms. A stream is
    single-consumer: parallel callers must derive children with
    :meth:`child`, never share one generator.

    Parameters
    ----------
    seed : int
        Master seed (64-bit unsigned).
    stream_id : int
        Stream index under the master seed.
    """

    __slots__ = ("seed", "stream_id", "_path", "generator")

    def __init__(self, seed, stream_id=0, _path=()):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._path = tuple(int(p) for p in _path)
        key = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id, *self._path))
        self.generator = np.random.Generator(np.random.Philox(key))

    def child(self, *indices):
        """Derive an independent stream; same indices always give the same stream."""
        if not indices:
            raise ValueError("child() needs at least one index")
        return RngStream(self.seed, self.stream_id, self._path + tuple(indices))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, path={self._path})"


def mvn_sample(mean, cov, rng, n):
    """Draw `n` vectors from a multivariate Gaussian.

    Parameters
    ----------
    mean : array_like, shape (dim,)
    cov : SpdMatrix
    rng : RngStream
    n : int

    Returns
    -------
    ndarray, shape (n, dim)
        ``mean + L z`` with ``z`` standard normal and ``L`` the Cholesky
        factor of `cov`; deterministic given the stream state.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    if mean.shape != (cov.dim,):
        raise DimensionMismatch(f"mean of shape {mean.shape} against cov of dim {cov.dim}")
    z = rng.generator.standard_normal((int(n), cov.dim))
    return mean + z @ cov.chol.T


def gaussian_logpdf(x, mean, cov):
    """Log-density of a multivariate Gaussian at `x`.

    Computed through the Cholesky factor: the log-determinant comes from the
    factor diagonal and the quadratic form from a triangular solve, so the
    result stays finite in log space wherever the inputs are finite.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    if x.shape != mean.shape or x.shape != (cov.dim,):
        raise DimensionMismatch(
            f"x {x.shape}, mean {mean.shape}, cov dim {cov.dim} do not agree"
        )
    maha = cov.maha_sq(x - mean)
    return float(-0.5 * cov.dim * LOG_2PI - 0.5 * cov.log_det - 0.5 * maha)


def gaussian_logpdf_rows(xs, mean, cov):
    """Vectorized :func:`gaussian_logpdf` over the rows of `xs`."""
    xs = np.asarray(xs, dtype=float)
    maha = cov.maha_sq(xs - mean)
    return -0.5 * cov.dim * LOG_2PI - 0.5 * cov.log_det - 0.5 * maha


def frobenius_norm_diff(a, b):
    """Frobenius norm of ``a - b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    return float(np.linalg.norm(a - b))


def frobenius_rel_diff(a, b):
    """Relative Frobenius change ``||a - b||_F / ||a||_F``.

    The first argument is the new iterate: its norm is the denominator.

    Raises
    ------
    ZeroNorm
        If ``||a||_F`` is zero.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    denom = float(np.linalg.norm(a))
    if denom == 0.0:
        raise ZeroNorm("reference matrix has zero Frobenius norm")
    return float(np.linalg.norm(a - b)) / denom


def as_spd(value, dim):
    """Coerce a scalar, array, or SpdMatrix into an SpdMatrix of order `dim`."""
    if isinstance(value, SpdMatrix):
        if value.dim != dim:
            raise DimensionMismatch(f"SpdMatrix of dim {value.dim}, expected {dim}")
        return value
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return spd_from_matrix(float(arr) * np.eye(dim))
    return spd_from_matrix(arr)
