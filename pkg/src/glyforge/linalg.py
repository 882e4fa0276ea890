"""Batched matrix exponential by scaling and squaring.

The kernel is a degree-6 Taylor polynomial. Each matrix in a stack gets its
own squaring count, so the result for one matrix never depends on what else
shares the batch.
"""

import numpy as np

TAYLOR_DEGREE = 6
TOLERANCE = 1e-12
# largest 1-norm for which the degree-6 remainder x**7/7! stays below TOLERANCE
THETA = 2.0**-4
MAX_DIM = 16


class MatrixExpError(ArithmeticError):
    """Raised when the exponential cannot be formed to working precision."""


def squaring_count(norm):
    """Number of squarings needed to bring ``norm`` under :data:`THETA`."""
    norm = np.asarray(norm, dtype=float)
    with np.errstate(divide="ignore"):
        s = np.ceil(np.log2(norm / THETA))
    s = np.where(norm > THETA, s, 0.0)
    return s.astype(np.int64)


def matrix_exp(M):
    """Exponential of a square matrix or a stack of square matrices.

    Parameters
    ----------
    M : array_like, shape (..., n, n)
        Real matrices with ``n <= 16`` and finite entries.

    Returns
    -------
    numpy.ndarray
        ``exp(M)`` with the same shape as ``M``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {M.shape}")
    n = M.shape[-1]
    if n > MAX_DIM:
        raise ValueError(f"matrix dimension {n} exceeds {MAX_DIM}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")

    single = M.ndim == 2
    stack = M.reshape(-1, n, n)
    norms = np.abs(stack).sum(axis=-2).max(axis=-1)
    s = squaring_count(norms)

    # scaling by a power of two is exact
    X = stack * np.exp2(-s.astype(float))[:, None, None]
    eye = np.eye(n)
    X2 = X @ X
    X3 = X2 @ X
    E = eye + X + X2 / 2.0 + X3 / 6.0 + X3 @ (X / 24.0 + X2 / 120.0 + X3 / 720.0)

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(int(s.max(initial=0))):
            active = s > k
            if active.all():
                E = E @ E
            else:
                E = np.where(active[:, None, None], E @ E, E)

    if not np.all(np.isfinite(E)):
        bad = ~np.isfinite(E).all(axis=(-2, -1))
        raise MatrixExpError(
            f"matrix exponential overflowed for {int(bad.sum())} matrices; "
            f"max 1-norm {norms[bad].max():.6g}, squarings {int(s[bad].max())}"
        )
    return E[0] if single else E.reshape(M.shape)
