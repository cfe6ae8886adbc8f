"""Immutable coordinate-format sparse matrices."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import kernels


class SparseMatrix:
    """Sorted, deduplicated COO matrix with a lazily built CSR view.

    Entries are kept in row-major order with no explicit zeros. When
    ``symmetric`` is set the constructor verifies that the pattern and
    values mirror across the diagonal.
    """

    __slots__ = ("rows", "cols", "row", "col", "val", "symmetric", "_indptr", "_dense")

    def __init__(self, rows, cols, row, col, val, symmetric=False, *, _trusted=False):
        self.rows = int(rows)
        self.cols = int(cols)
        row = np.asarray(row, dtype=np.int64)
        col = np.asarray(col, dtype=np.int64)
        val = np.asarray(val, dtype=np.float64)
        if not _trusted:
            row, col, val = _coalesce(self.rows, self.cols, row, col, val)
        self.row, self.col, self.val = row, col, val
        for arr in (self.row, self.col, self.val):
            arr.setflags(write=False)
        self._indptr = None
        self._dense = None
        self.symmetric = bool(symmetric)
        if self.symmetric and not self._mirrors():
            raise ValueError("symmetric flag set on a non-symmetric matrix")

    @classmethod
    def from_triplets(cls, rows, cols, row, col, val, symmetric=False):
        """Build from possibly unsorted triplets; duplicate positions are summed."""
        return cls(rows, cols, row, col, val, symmetric=symmetric)

    @classmethod
    def from_dense(cls, dense, symmetric=False):
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2:
            raise ShapeError(f"expected a 2-D array, got shape {dense.shape}")
        r, c = np.nonzero(dense)
        return cls(dense.shape[0], dense.shape[1], r, c, dense[r, c], symmetric=symmetric, _trusted=True)

    @classmethod
    def identity(cls, n):
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, idx, idx, np.ones(n), symmetric=True, _trusted=True)

    @classmethod
    def zeros(cls, rows, cols):
        empty = np.zeros(0, dtype=np.int64)
        return cls(rows, cols, empty, empty, np.zeros(0), symmetric=rows == cols, _trusted=True)

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self):
        return int(self.val.size)

    @property
    def indptr(self):
        if self._indptr is None:
            counts = np.bincount(self.row, minlength=self.rows)
            ptr = np.zeros(self.rows + 1, dtype=np.int64)
            np.cumsum(counts, out=ptr[1:])
            ptr.setflags(write=False)
            self._indptr = ptr
        return self._indptr

    def entries(self):
        """Iterate ``(row, col, value)`` in row-major order."""
        return zip(self.row.tolist(), self.col.tolist(), self.val.tolist())

    def todense(self):
        out = np.zeros((self.rows, self.cols))
        out[self.row, self.col] = self.val
        return out

    def transpose(self):
        if self.symmetric:
            return self
        return SparseMatrix(self.cols, self.rows, self.col, self.row, self.val)

    @property
    def T(self):
        return self.transpose()

    def row_sums(self):
        return np.bincount(self.row, weights=self.val, minlength=self.rows)

    def get(self, i, j):
        lo, hi = self.indptr[i], self.indptr[i + 1]
        k = lo + np.searchsorted(self.col[lo:hi], j)
        if k < hi and self.col[k] == j:
            return float(self.val[k])
        return 0.0

    def map_values(self, fn, symmetric=None):
        """Apply ``fn`` to the stored values; zeros produced by ``fn`` are dropped."""
        sym = self.symmetric if symmetric is None else symmetric
        return SparseMatrix(self.rows, self.cols, self.row, self.col, fn(self.val), symmetric=sym)

    def _mirrors(self):
        if self.rows != self.cols:
            return False
        t_row, t_col, t_val = _coalesce(self.rows, self.cols, self.col, self.row, self.val)
        return (
            np.array_equal(t_row, self.row)
            and np.array_equal(t_col, self.col)
            and np.array_equal(t_val, self.val)
        )

    def __repr__(self):
        return f"SparseMatrix({self.rows}x{self.cols}, nnz={self.nnz}, symmetric={self.symmetric})"


def _coalesce(rows, cols, row, col, val):
    if row.shape != col.shape or row.shape != val.shape:
        raise ShapeError("row, col and val must have equal length")
    if row.size and (row.min() < 0 or row.max() >= rows or col.min() < 0 or col.max() >= cols):
        raise ShapeError(f"index out of bounds for a {rows}x{cols} matrix")
    keys = row * cols + col
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    val = val[order]
    uniq, start = np.unique(keys, return_index=True)
    summed = np.add.reduceat(val, start) if val.size else val
    keep = summed != 0
    uniq = uniq[keep]
    return uniq // cols, uniq % cols, summed[keep]


# Above this fill ratio a BLAS product on the densified matrix beats the CSR
# loop; the cap keeps the cached dense copy under ~200 MB.
DENSE_FILL = 0.05
DENSE_CELLS = 25_000_000


def _dense_view(s):
    if s._dense is None:
        cells = s.rows * s.cols
        if cells == 0 or cells > DENSE_CELLS or s.nnz < DENSE_FILL * cells:
            return None
        dense = s.todense()
        dense.setflags(write=False)
        s._dense = dense
    return s._dense


def spmm(s: SparseMatrix, d):
    """Sparse-dense product ``s @ d`` over the leading axis of ``d``.

    Trailing axes of ``d`` are carried through unchanged.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim == 0 or d.shape[0] != s.cols:
        raise ShapeError(f"cannot multiply {s.rows}x{s.cols} sparse by array of shape {d.shape}")
    flat = np.ascontiguousarray(d.reshape(s.cols, -1))
    dense = _dense_view(s)
    if dense is not None:
        return (dense @ flat).reshape((s.rows,) + d.shape[1:])
    out = kernels.spmm_csr(s.indptr, np.ascontiguousarray(s.col), np.ascontiguousarray(s.val), flat)
    return np.asarray(out).reshape((s.rows,) + d.shape[1:])


def spmm_t(s: SparseMatrix, d):
    """``s.T @ d`` without building the transpose."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim == 0 or d.shape[0] != s.rows:
        raise ShapeError(f"cannot multiply transpose of {s.rows}x{s.cols} sparse by shape {d.shape}")
    if s.symmetric:
        return spmm(s, d)
    flat = np.ascontiguousarray(d.reshape(s.rows, -1))
    dense = _dense_view(s)
    if dense is not None:
        return (dense.T @ flat).reshape((s.cols,) + d.shape[1:])
    out = kernels.spmm_csr_t(s.indptr, np.ascontiguousarray(s.col), np.ascontiguousarray(s.val), flat, s.cols)
    return np.asarray(out).reshape((s.cols,) + d.shape[1:])
