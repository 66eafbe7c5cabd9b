"""Dense linear algebra helpers and seedable random streams.

Vectors are 1-D ``float64`` arrays and matrices are 2-D symmetric
``float64`` arrays; there are no wrapper classes around them.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla
from scipy.special import ndtr

__all__ = [
    "NotPositiveDefiniteError",
    "SeededRng",
    "as_vector",
    "cholesky_solve",
    "inv_m_norm_sq",
    "m_norm_sq",
    "psd_cholesky",
]

# pivots below this fraction of the largest one are treated as singular (cond > ~1e13)
_PIVOT_RTOL = 3e-7


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix that must be positive definite is not."""

    def __init__(self, msg="not positive definite"):
        super().__init__(msg)


def as_vector(x, d=None, name="x"):
    """Return ``x`` as a finite 1-D float64 array, optionally checking its length."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {v.shape}")
    if d is not None and v.shape[0] != d:
        raise ValueError(f"dimension mismatch: {name} has length {v.shape[0]}, expected {d}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def _as_square(M, d):
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got shape {A.shape}")
    if A.shape[0] != d:
        raise ValueError(f"dimension mismatch: matrix is {A.shape[0]}x{A.shape[0]}, vector has length {d}")
    return _symmetric(A)


def _symmetric(A):
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    # products like X^T D X may differ from their transpose in the last bit
    if np.any(np.abs(A - A.T) > 1e-12 * max(np.abs(A).max(), 1e-300)):
        raise ValueError("matrix is not symmetric")
    return A


def m_norm_sq(x, M):
    """Squared weighted norm ``x^T M x``."""
    x = as_vector(x)
    A = _as_square(M, x.shape[0])
    return float(x @ A @ x)


def psd_cholesky(M):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises
    ------
    NotPositiveDefiniteError
        If the factorization fails or a pivot is numerically zero.
    """
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got shape {A.shape}")
    try:
        C = np.linalg.cholesky(_symmetric(A))
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError() from None
    diag = np.diag(C)
    if not np.all(np.isfinite(C)) or diag.min() <= _PIVOT_RTOL * diag.max():
        raise NotPositiveDefiniteError()
    return C


def inv_m_norm_sq(x, M):
    """Squared inverse-weighted norm ``x^T M^{-1} x`` via a triangular solve."""
    x = as_vector(x)
    C = psd_cholesky(_as_square(M, x.shape[0]))
    z = sla.solve_triangular(C, x, lower=True)
    return float(z @ z)


def cholesky_solve(M, b):
    """Solve ``M x = b`` for positive definite ``M``.

    ``b`` may be a vector or a matrix of right-hand sides.
    """
    b = np.asarray(b, dtype=np.float64)
    C = psd_cholesky(_as_square(M, b.shape[0]))
    return sla.cho_solve((C, True), b)


class SeededRng:
    """Deterministic random stream keyed by ``(seed, stream)``.

    Streams are derived with :class:`numpy.random.SeedSequence` spawn keys, so
    distinct stream ids (and children from :meth:`spawn`) are independent.
    Every public draw goes through :meth:`normal`; uniforms are obtained from
    normals through the Gaussian CDF so each consumer uses a fixed count of
    normal variates per sample.

    Parameters
    ----------
    seed : int
        64-bit seed.
    stream : int or tuple of int
        Stream id; a tuple addresses a child stream.
    """

    def __init__(self, seed, stream=0):
        if isinstance(stream, (int, np.integer)):
            stream = (int(stream),)
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"

    def spawn(self, i):
        """Independent child stream number ``i`` (does not advance this stream)."""
        return SeededRng(self.seed, self.stream + (int(i),))

    def normal(self, shape=None):
        return self.generator.standard_normal(shape)

    def uniform_from_normal(self, shape=None):
        return ndtr(self.generator.standard_normal(shape))

    def integers(self, low, high):
        """Integer uniform on ``{low, ..., high}`` inclusive."""
        return int(self.generator.integers(low, high, endpoint=True))

    def random_bytes(self, n):
        return self.generator.bytes(n)
