"""Sparse matrix assembly and direct solvers.

Matrices are assembled as coordinate triplets and finalized into compressed
storage once, since assembly happens per simulation setup rather than per
step.  The implicit-step system matrix is factorized a single time and the
factorization is reused for every subsequent solve; a general sparse LU
handles the nonsymmetric systems arising in the adjoint fallback.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, NotPositiveDefinite, SingularMatrix

__all__ = [
    "SparseMatrix",
    "SymmetricFactorization",
    "as_csr",
    "as_csc",
    "factorize_spd",
    "solve_prefactorized",
    "solve_general",
]


class SparseMatrix:
    """Coordinate-list sparse matrix builder.

    Entries are accumulated as ``(row, col, value)`` triplets; duplicate
    coordinates are summed when the matrix is finalized to compressed
    storage.  Instances are immutable once finalized and safe to share.
    """

    def __init__(self, n_rows: int, n_cols: int):
        if n_rows < 0 or n_cols < 0:
            raise ValueError("matrix dimensions must be nonnegative")
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self._csr: sp.csr_matrix | None = None

    def add(self, rows, cols, vals) -> None:
        """Append triplets.  Scalar or array-valued; indices must be in bounds."""
        rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
        cols = np.atleast_1d(np.asarray(cols, dtype=np.int64))
        vals = np.atleast_1d(np.asarray(vals, dtype=np.float64))
        if not (rows.shape == cols.shape == vals.shape):
            raise DimensionMismatch("triplet arrays must share a shape")
        if rows.size and (rows.min() < 0 or rows.max() >= self.n_rows):
            raise IndexError("row index out of bounds")
        if cols.size and (cols.min() < 0 or cols.max() >= self.n_cols):
            raise IndexError("col index out of bounds")
        self._rows.append(rows)
        self._cols.append(cols)
        self._vals.append(vals)
        self._csr = None

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Raw (rows, cols, values) triplets accumulated so far."""
        if not self._rows:
            empty_i = np.empty(0, dtype=np.int64)
            return empty_i, empty_i.copy(), np.empty(0, dtype=np.float64)
        return (
            np.concatenate(self._rows),
            np.concatenate(self._cols),
            np.concatenate(self._vals),
        )

    def tocsr(self) -> sp.csr_matrix:
        """Finalize: duplicates summed, compressed row storage (cached)."""
        if self._csr is None:
            r, c, v = self.entries
            m = sp.coo_matrix((v, (r, c)), shape=self.shape)
            csr = m.tocsr()
            csr.sum_duplicates()
            self._csr = csr
        return self._csr

    def toarray(self) -> np.ndarray:
        return self.tocsr().toarray()

    @classmethod
    def from_scipy(cls, a: sp.spmatrix) -> "SparseMatrix":
        coo = sp.coo_matrix(a)
        out = cls(*coo.shape)
        out.add(coo.row, coo.col, coo.data)
        return out


def as_csr(a) -> sp.csr_matrix:
    """Accept a SparseMatrix, scipy sparse matrix, or dense array."""
    if isinstance(a, SparseMatrix):
        return a.tocsr()
    if sp.issparse(a):
        return a.tocsr()
    return sp.csr_matrix(np.asarray(a, dtype=np.float64))


def as_csc(a) -> sp.csc_matrix:
    return as_csr(a).tocsc()


class SymmetricFactorization:
    """Reusable factorization of a symmetric positive definite matrix.

    Wraps a sparse LU with symmetric-mode diagonal pivoting and a
    fill-reducing ordering chosen once at factorization.  Solves against a
    shared factorization may run concurrently; the object is immutable.
    """

    def __init__(self, lu: spla.SuperLU, dim: int):
        self._lu = lu
        self.dim = dim

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.dim:
            raise DimensionMismatch(
                f"right-hand side has {b.shape[0]} rows, factorization expects {self.dim}"
            )
        return self._lu.solve(b)


def factorize_spd(P) -> SymmetricFactorization:
    """Factorize a symmetric positive definite matrix for repeated solves.

    Raises NotPositiveDefinite if a nonpositive pivot is encountered.
    """
    A = as_csc(P)
    n, m = A.shape
    if n != m:
        raise DimensionMismatch("matrix must be square")
    d = A.diagonal()
    if np.any(d <= 0.0):
        raise NotPositiveDefinite("nonpositive diagonal entry")
    try:
        lu = spla.splu(
            A,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True),
        )
    except RuntimeError as exc:  # "Factor is exactly singular"
        raise NotPositiveDefinite(str(exc)) from exc
    if np.any(lu.U.diagonal() <= 0.0):
        raise NotPositiveDefinite("nonpositive pivot encountered")
    return SymmetricFactorization(lu, n)


def solve_prefactorized(F: SymmetricFactorization, b: np.ndarray) -> np.ndarray:
    """Back-substitution against an existing factorization."""
    return F.solve(b)


def solve_general(A, b: np.ndarray) -> np.ndarray:
    """Solve a square, possibly nonsymmetric sparse system by LU with pivoting.

    Used for the adjoint fallback, whose matrix is usually neither symmetric
    nor positive definite.  Raises SingularMatrix if pivoting fails.
    """
    M = as_csc(A)
    n, m = M.shape
    if n != m:
        raise DimensionMismatch("matrix must be square")
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != n:
        raise DimensionMismatch(f"rhs has {b.shape[0]} rows, matrix has {n}")
    try:
        lu = spla.splu(M)
        x = lu.solve(b)
    except RuntimeError as exc:
        raise SingularMatrix(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularMatrix("solution contains non-finite entries")
    return x
