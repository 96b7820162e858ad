"""Sparse storage, direct factorization and vector kernels for the Newton solve."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import DimensionError, SingularMatrix

CsrMatrix = sp.csr_matrix

PIVOT_RTOL = 1e-14


def csr_from_triplets(triplets, nrows, ncols):
    """Assemble ``(i, j, value)`` triplets; duplicates are summed."""
    if len(triplets) == 0:
        return sp.csr_matrix((nrows, ncols))
    rows, cols, vals = (np.asarray(a) for a in zip(*triplets))
    return csr_from_arrays(rows, cols, vals, nrows, ncols)


def csr_from_arrays(rows, cols, vals, nrows, ncols):
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= nrows
                      or cols.min() < 0 or cols.max() >= ncols):
        raise IndexError("triplet index out of range")
    mat = sp.coo_matrix((np.asarray(vals, dtype=float), (rows, cols)),
                        shape=(nrows, ncols)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


@dataclass(frozen=True, eq=False)
class LuFactors:
    lu: spla.SuperLU
    n: int


def lu_factorize(A):
    """Pivoted sparse LU with a COLAMD fill-reducing column ordering."""
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise DimensionError(f"cannot factor non-square {A.shape} matrix")
    n = A.shape[0]
    if n == 0:
        raise SingularMatrix("empty matrix")
    amax = np.abs(A.data).max() if A.nnz else 0.0
    if not np.isfinite(amax):
        raise SingularMatrix("matrix has non-finite entries")
    if amax == 0.0:
        raise SingularMatrix("zero matrix")
    try:
        lu = spla.splu(A, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SingularMatrix(str(exc)) from None
    pivots = np.abs(lu.U.diagonal())
    if pivots.min() <= PIVOT_RTOL * amax:
        raise SingularMatrix(f"pivot {pivots.min():.3e} below threshold")
    return LuFactors(lu=lu, n=n)


def solve(fac, b):
    b = np.asarray(b, dtype=float)
    if b.shape != (fac.n,):
        raise DimensionError(f"rhs has shape {b.shape}, expected ({fac.n},)")
    return fac.lu.solve(b)


def _check(x, y):
    if np.shape(x) != np.shape(y):
        raise DimensionError(f"length mismatch {np.shape(x)} vs {np.shape(y)}")


def dot(x, y):
    _check(x, y)
    return float(np.dot(x, y))


def norm2(x):
    # math.fsum keeps large sums reproducible independent of BLAS blocking.
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return 0.0
    scale = np.abs(x).max()
    if scale == 0.0 or not np.isfinite(scale):
        return float(scale)
    y = x / scale
    return float(scale * math.sqrt(math.fsum((y * y).tolist())))


def axpy(a, x, y):
    """Return ``a * x + y``."""
    _check(x, y)
    return a * np.asarray(x) + np.asarray(y)


def scale(a, x):
    return a * np.asarray(x)


def max_abs(x):
    x = np.asarray(x)
    return float(np.abs(x).max()) if x.size else 0.0
