"""Compressed-row sparse matrices and the handful of kernels the model needs.

Every interaction graph and the hypergraph itself are stored as
:class:`SparseBinaryMatrix`. Dense operands are plain ``float64`` numpy
arrays of shape ``(n_rows, n_cols)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SparseBinaryMatrix",
    "from_coo",
    "from_arrays",
    "identity",
    "zeros",
    "block",
    "spmm",
    "spmm_t",
    "transpose",
    "row_degrees",
    "col_degrees",
    "dropout_nonzeros",
    "binarize",
]

INDEX = np.int64
REAL = np.float64


@dataclass(frozen=True, eq=False)
class SparseBinaryMatrix:
    """CSR matrix with sorted, unique column indices per row.

    Values are 1.0 for interaction graphs but any nonzero real is allowed
    (dropout rescales survivors).
    """

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.n_rows < 0 or self.n_cols < 0:
            raise ValueError(f"negative shape ({self.n_rows}, {self.n_cols})")
        if self.row_offsets.shape != (self.n_rows + 1,):
            raise ValueError(
                f"row_offsets has length {len(self.row_offsets)}, expected {self.n_rows + 1}"
            )
        if len(self.col_indices) != len(self.values):
            raise ValueError("col_indices and values differ in length")
        if self.row_offsets[-1] != len(self.col_indices):
            raise ValueError("last row offset must equal nnz")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(len(self.col_indices))

    @cached_property
    def row_indices(self) -> np.ndarray:
        """Row id of every stored entry (the expanded form of ``row_offsets``)."""
        return np.repeat(np.arange(self.n_rows, dtype=INDEX), np.diff(self.row_offsets))

    @cached_property
    def _csr(self) -> sp.csr_matrix:
        # No copy: scipy wraps our arrays. Never mutate the result.
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=self.shape, copy=False
        )

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr.copy()

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=REAL)
        out[self.row_indices, self.col_indices] = self.values
        return out

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Columns and values stored in row ``i``."""
        lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[lo:hi], self.values[lo:hi]

    def entries(self) -> list[tuple[int, int, float]]:
        return list(
            zip(self.row_indices.tolist(), self.col_indices.tolist(), self.values.tolist())
        )

    def check_invariants(self) -> None:
        """Raise ``AssertionError`` if the CSR invariants do not hold."""
        assert np.all(np.diff(self.row_offsets) >= 0), "row_offsets must be nondecreasing"
        assert self.row_offsets[0] == 0
        if self.nnz:
            assert self.col_indices.min() >= 0 and self.col_indices.max() < self.n_cols
            same_row = self.row_indices[1:] == self.row_indices[:-1]
            assert np.all(np.diff(self.col_indices)[same_row] > 0), "columns must increase"
            assert np.all(self.values != 0), "explicit zeros stored"

    def equals(self, other: "SparseBinaryMatrix") -> bool:
        """Exact structural and value equality."""
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.values, other.values)
        )

    def __matmul__(self, x: np.ndarray) -> np.ndarray:
        return spmm(self, x)

    def __repr__(self) -> str:
        return f"SparseBinaryMatrix(shape={self.shape}, nnz={self.nnz})"


def _from_sorted(rows, cols, vals, n_rows: int, n_cols: int) -> SparseBinaryMatrix:
    counts = np.bincount(rows, minlength=n_rows) if len(rows) else np.zeros(n_rows, INDEX)
    offsets = np.zeros(n_rows + 1, dtype=INDEX)
    np.cumsum(counts, out=offsets[1:])
    return SparseBinaryMatrix(
        n_rows,
        n_cols,
        offsets,
        np.ascontiguousarray(cols, dtype=INDEX),
        np.ascontiguousarray(vals, dtype=REAL),
    )


def from_arrays(rows, cols, values, n_rows: int, n_cols: int) -> SparseBinaryMatrix:
    """Vectorised COO constructor. Duplicates are summed, zero results dropped."""
    rows = np.asarray(rows, dtype=INDEX).ravel()
    cols = np.asarray(cols, dtype=INDEX).ravel()
    values = np.array(np.broadcast_to(np.asarray(values, dtype=REAL), rows.shape)).ravel()
    if not (len(rows) == len(cols) == len(values)):
        raise ValueError("rows, cols and values must have the same length")
    bad = (rows < 0) | (rows >= n_rows) | (cols < 0) | (cols >= n_cols)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"entry {k} ({rows[k]}, {cols[k]}, {values[k]}) out of range for "
            f"shape ({n_rows}, {n_cols})"
        )
    if len(rows) == 0:
        return _from_sorted(rows, cols, values, n_rows, n_cols)
    # value is the last sort key so duplicate sums do not depend on input order
    order = np.lexsort((values, cols, rows))
    rows, cols, values = rows[order], cols[order], values[order]
    start = np.ones(len(rows), dtype=bool)
    start[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
    heads = np.flatnonzero(start)
    summed = np.add.reduceat(values, heads)
    rows, cols = rows[heads], cols[heads]
    keep = summed != 0
    return _from_sorted(rows[keep], cols[keep], summed[keep], n_rows, n_cols)


def from_coo(
    entries: Iterable[Sequence[float]], n_rows: int, n_cols: int
) -> SparseBinaryMatrix:
    """Build a matrix from ``(row, col, value)`` triples."""
    entries = list(entries)
    if not entries:
        return from_arrays([], [], [], n_rows, n_cols)
    for k, (r, c, _v) in enumerate(entries):
        if not (0 <= r < n_rows and 0 <= c < n_cols):
            raise ValueError(
                f"entry {k} {tuple(entries[k])} out of range for shape ({n_rows}, {n_cols})"
            )
    arr = np.asarray(entries, dtype=REAL)
    return from_arrays(arr[:, 0].astype(INDEX), arr[:, 1].astype(INDEX), arr[:, 2], n_rows, n_cols)


def identity(n: int) -> SparseBinaryMatrix:
    idx = np.arange(n, dtype=INDEX)
    return SparseBinaryMatrix(n, n, np.arange(n + 1, dtype=INDEX), idx, np.ones(n, dtype=REAL))


def zeros(n_rows: int, n_cols: int) -> SparseBinaryMatrix:
    return SparseBinaryMatrix(
        n_rows, n_cols, np.zeros(n_rows + 1, INDEX), np.zeros(0, INDEX), np.zeros(0, REAL)
    )


def block(blocks: Sequence[Sequence[SparseBinaryMatrix]]) -> SparseBinaryMatrix:
    """Assemble a block matrix. Row heights and column widths must line up."""
    heights = [row[0].n_rows for row in blocks]
    widths = [m.n_cols for m in blocks[0]]
    rows, cols, vals = [], [], []
    r0 = 0
    for bi, row in enumerate(blocks):
        if len(row) != len(widths):
            raise ValueError(f"block row {bi} has {len(row)} blocks, expected {len(widths)}")
        c0 = 0
        for bj, m in enumerate(row):
            if m.shape != (heights[bi], widths[bj]):
                raise ValueError(
                    f"block ({bi}, {bj}) has shape {m.shape}, expected {(heights[bi], widths[bj])}"
                )
            rows.append(m.row_indices + r0)
            cols.append(m.col_indices + c0)
            vals.append(m.values)
            c0 += widths[bj]
        r0 += heights[bi]
    return from_arrays(
        np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), sum(heights), sum(widths)
    )


def _check_dense(a: SparseBinaryMatrix, x: np.ndarray, inner: int) -> np.ndarray:
    x = np.asarray(x, dtype=REAL)
    if x.ndim != 2:
        raise ValueError(f"dense operand must be 2-D, got shape {x.shape}")
    if x.shape[0] != inner:
        raise ValueError(f"dimension mismatch: sparse {a.shape} vs dense {x.shape}")
    return x


def spmm(a: SparseBinaryMatrix, x: np.ndarray) -> np.ndarray:
    """Sparse x dense product ``A @ X``."""
    x = _check_dense(a, x, a.n_cols)
    return np.asarray(a._csr @ x)


def spmm_t(a: SparseBinaryMatrix, x: np.ndarray) -> np.ndarray:
    """``A.T @ X`` without materialising the transpose."""
    x = _check_dense(a, x, a.n_rows)
    return np.asarray(a._csr.T @ x)


def transpose(a: SparseBinaryMatrix) -> SparseBinaryMatrix:
    # stable sort by column keeps source rows ascending inside each output row
    order = np.argsort(a.col_indices, kind="stable")
    return _from_sorted(
        a.col_indices[order], a.row_indices[order], a.values[order], a.n_cols, a.n_rows
    )


def row_degrees(a: SparseBinaryMatrix) -> np.ndarray:
    return np.bincount(a.row_indices, weights=a.values, minlength=a.n_rows).astype(REAL)


def col_degrees(a: SparseBinaryMatrix) -> np.ndarray:
    return np.bincount(a.col_indices, weights=a.values, minlength=a.n_cols).astype(REAL)


def dropout_nonzeros(
    a: SparseBinaryMatrix, p: float, rng: np.random.Generator
) -> SparseBinaryMatrix:
    """Drop each stored entry with probability ``p``; rescale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    keep = rng.random(a.nnz) >= p
    return _from_sorted(
        a.row_indices[keep], a.col_indices[keep], a.values[keep] / (1.0 - p), a.n_rows, a.n_cols
    )


def binarize(a: SparseBinaryMatrix) -> SparseBinaryMatrix:
    """Same sparsity pattern with every stored value set to 1."""
    return SparseBinaryMatrix(a.n_rows, a.n_cols, a.row_offsets, a.col_indices, np.ones(a.nnz))
