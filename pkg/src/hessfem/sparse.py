"""Compressed-row sparse matrices and a reusable direct factorization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "SingularMatrixError",
    "SparseMatrix",
    "Factorization",
    "from_triplets",
    "factorize",
    "solve",
    "solve_transpose",
]

PIVOT_RTOL = 1e-14


class SingularMatrixError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """CSR matrix: ``indptr`` row offsets, sorted ``indices`` per row, ``data``."""

    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        for a in (self.indptr, self.indices, self.data):
            a.flags.writeable = False

    @property
    def nnz(self) -> int:
        return int(self.data.size)

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.to_scipy() @ np.asarray(x, dtype=float)

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        return self.to_scipy().T @ np.asarray(x, dtype=float)

    def __matmul__(self, x):
        return self.matvec(x)

    def norm_inf(self) -> float:
        if self.nnz == 0:
            return 0.0
        return float(abs(self.to_scipy()).sum(axis=1).max())


def from_triplets(n: int, m: int, rows, cols=None, values=None) -> SparseMatrix:
    """Build an ``n x m`` CSR matrix, summing duplicate entries.

    Either pass parallel ``rows, cols, values`` arrays, or a single list of
    ``(row, col, value)`` tuples as ``rows``.
    """
    if values is None and cols is None:
        entries = list(rows)
        if entries:
            r, c, v = zip(*entries)
        else:
            r, c, v = (), (), ()
        rows, cols, values = r, c, v
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    values = np.asarray(values, dtype=float).ravel()
    if not (rows.size == cols.size == values.size):
        raise ValueError("triplet arrays differ in length")
    if rows.size and (rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= m):
        raise IndexError("triplet index out of range")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite matrix entry")

    key = rows * m + cols
    order = np.argsort(key, kind="stable")
    key = key[order]
    uniq, start = np.unique(key, return_index=True)
    data = np.add.reduceat(values[order], start) if key.size else np.zeros(0)
    r = uniq // m
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, r + 1, 1)
    np.cumsum(indptr, out=indptr)
    return SparseMatrix((n, m), indptr, (uniq % m).astype(np.int64), data)


class Factorization:
    """Sparse LU of one matrix snapshot; solves with A and with A^T."""

    def __init__(self, A: SparseMatrix):
        n, m = A.shape
        if n != m:
            raise ValueError("factorize() needs a square matrix")
        self.shape = A.shape
        self.matrix = A
        try:
            self._lu = spla.splu(A.to_scipy().tocsc())
        except RuntimeError as err:
            raise SingularMatrixError(str(err)) from err
        piv = np.abs(self._lu.U.diagonal())
        if piv.size and piv.min() <= PIVOT_RTOL * piv.max():
            raise SingularMatrixError("zero pivot in sparse LU")

    def _rhs(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.shape[0]:
            raise ValueError(f"right-hand side has length {b.shape[0]}, expected {self.shape[0]}")
        return b

    def solve(self, b) -> np.ndarray:
        return self._lu.solve(self._rhs(b))

    def solve_transpose(self, b) -> np.ndarray:
        return self._lu.solve(self._rhs(b), trans="T")


def factorize(A: SparseMatrix) -> Factorization:
    return Factorization(A)


def solve(F: Factorization, b) -> np.ndarray:
    return F.solve(b)


def solve_transpose(F: Factorization, b) -> np.ndarray:
    return F.solve_transpose(b)
