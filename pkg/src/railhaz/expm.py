"""Matrix exponential by scaling and squaring with a diagonal (6, 6) Pade approximant.

Works on a single ``(q, q)`` matrix or a stack ``(n, q, q)``; every matrix in a
stack gets its own scaling exponent. Stacks are processed in a component
layout ``(q, q, n)`` so that each scalar operation is vectorized over ``n``,
which is much faster than looping ``numpy.linalg`` over many tiny matrices.
"""

from __future__ import annotations

import numpy as np

__all__ = ["matrix_exponential", "expm_components", "PADE6_COEFFICIENTS"]

# c_k = (12 - k)! 6! / (12! k! (6 - k)!)
PADE6_COEFFICIENTS = (
    1.0,
    1.0 / 2.0,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15840.0,
    1.0 / 665280.0,
)


def _squarings(norms: np.ndarray) -> np.ndarray:
    # Smallest j >= 0 with ||M||_1 / 2**j <= 1/2.
    with np.errstate(divide="ignore"):
        j = np.ceil(np.log2(norms) + 1.0)
    j[~np.isfinite(j)] = 0
    return np.maximum(j, 0).astype(np.int64)


def _mm(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    q = A.shape[0]
    C = np.empty_like(A)
    for i in range(q):
        for j in range(q):
            s = A[i, 0] * B[0, j]
            for k in range(1, q):
                s = s + A[i, k] * B[k, j]
            C[i, j] = s
    return C


def _solve(D: np.ndarray, N: np.ndarray) -> np.ndarray:
    # Gauss-Jordan without pivoting. After scaling, D = V - U is column
    # diagonally dominant, for which pivoting is unnecessary.
    D = D.copy()
    X = N.copy()
    q = D.shape[0]
    for k in range(q):
        piv = 1.0 / D[k, k]
        D[k] *= piv
        X[k] *= piv
        for i in range(q):
            if i != k:
                f = D[i, k].copy()
                D[i] -= f * D[k]
                X[i] -= f * X[k]
    return X


def expm_components(A: np.ndarray) -> np.ndarray:
    """Exponentials of a stack given in component layout ``(q, q, n)``."""
    q = A.shape[0]
    # 1-norm: maximum absolute column sum
    colsums = [sum(np.abs(A[i, k]) for i in range(q)) for k in range(q)]
    norms = colsums[0]
    for k in range(1, q):
        norms = np.maximum(norms, colsums[k])
    j = _squarings(np.asarray(norms, dtype=float))
    A = A * np.ldexp(1.0, -j)

    c = PADE6_COEFFICIENTS
    A2 = _mm(A, A)
    A4 = _mm(A2, A2)
    A6 = _mm(A4, A2)
    W = c[3] * A2 + c[5] * A4
    V = c[2] * A2 + c[4] * A4 + c[6] * A6
    for i in range(q):
        W[i, i] += c[1]
        V[i, i] += c[0]
    U = _mm(A, W)
    R = _solve(V - U, V + U)

    jmax = int(j.max()) if j.size else 0
    for k in range(jmax):
        if np.all(j > k):
            R = _mm(R, R)
        else:
            R = np.where(j > k, _mm(R, R), R)
    return R


def matrix_exponential(M: np.ndarray) -> np.ndarray:
    """Compute ``exp(M)``.

    Parameters
    ----------
    M : ndarray, shape (q, q) or (n, q, q)
        Finite real matrices.

    Returns
    -------
    ndarray
        Array of the same shape holding the matrix exponentials.
    """
    A = np.asarray(M, dtype=float)
    single = A.ndim == 2
    if single:
        A = A[None]
    if A.ndim != 3 or A.shape[1] != A.shape[2]:
        raise ValueError(f"expected square matrices, got shape {np.shape(M)}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix exponential requires finite entries")
    if A.shape[0] == 0:
        return A.copy()
    R = expm_components(np.ascontiguousarray(A.transpose(1, 2, 0)))
    R = R.transpose(2, 0, 1)
    return R[0].copy() if single else np.ascontiguousarray(R)
