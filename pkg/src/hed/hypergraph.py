"""Complete hypergraph over users, items and bundles, and its normalised operators.

Node order in every stacked structure is users, then items, then bundles.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal

import numpy as np

from . import sparse
from .sparse import SparseBinaryMatrix

__all__ = [
    "HypergraphConfig",
    "CompleteHypergraph",
    "NormalizedOperator",
    "build_co_interaction",
    "assemble",
    "normalize_hypergraph",
    "normalize_ub",
    "with_blocks_zeroed",
    "with_ii_mode",
    "save_cache",
    "load_cache",
    "CacheError",
]


@dataclass(frozen=True)
class HypergraphConfig:
    n_threshold: int = 10
    ii_mode: Literal["zero", "identity"] = "zero"
    symmetric: bool = True

    def __post_init__(self):
        if self.n_threshold < 0:
            raise ValueError("n_threshold must be >= 0")
        if self.ii_mode not in ("zero", "identity"):
            raise ValueError(f"unknown ii_mode {self.ii_mode!r}")


@dataclass(frozen=True)
class CompleteHypergraph:
    h: SparseBinaryMatrix
    n_users: int
    n_items: int
    n_bundles: int

    @property
    def user_range(self) -> range:
        return range(0, self.n_users)

    @property
    def item_range(self) -> range:
        return range(self.n_users, self.n_users + self.n_items)

    @property
    def bundle_range(self) -> range:
        return range(self.n_users + self.n_items, self.h.n_rows)

    def block(self, rows: str, cols: str) -> np.ndarray:
        """Dense copy of one of the nine blocks, e.g. ``block("u", "u")``. For tests."""
        ranges = {"u": self.user_range, "i": self.item_range, "b": self.bundle_range}
        r, c = ranges[rows], ranges[cols]
        sub = self.h.to_scipy()[r.start : r.stop, c.start : c.stop]
        return sub.toarray()


def _inv_sqrt(deg: np.ndarray) -> np.ndarray:
    out = np.zeros_like(deg, dtype=np.float64)
    pos = deg > 0
    out[pos] = 1.0 / np.sqrt(deg[pos])
    return out


@dataclass(frozen=True)
class NormalizedOperator:
    """The chain ``diag(outer) M diag(inner) M^T diag(outer)`` applied lazily.

    With ``transposed`` set the chain is ``diag(outer) M^T diag(inner) M diag(outer)``.
    The product is never materialised.
    """

    matrix: SparseBinaryMatrix
    outer: np.ndarray
    inner: np.ndarray
    transposed: bool = False

    @property
    def size(self) -> int:
        return len(self.outer)

    def factors(self) -> list[tuple[str, object]]:
        """Factors in written (left-to-right) order."""
        first, second = ("mul_t", "mul") if self.transposed else ("mul", "mul_t")
        return [
            ("scale", self.outer),
            (first, self.matrix),
            ("scale", self.inner),
            (second, self.matrix),
            ("scale", self.outer),
        ]

    @staticmethod
    def _run(factors, x: np.ndarray) -> np.ndarray:
        for kind, f in reversed(factors):
            if kind == "scale":
                x = f[:, None] * x
            elif kind == "mul":
                x = sparse.spmm(f, x)
            else:
                x = sparse.spmm_t(f, x)
        return x

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.size:
            raise ValueError(f"operator of size {self.size} applied to shape {x.shape}")
        return self._run(self.factors(), x)

    def apply_transpose(self, x: np.ndarray) -> np.ndarray:
        """Apply the adjoint: reversed chain, every sparse factor transposed."""
        if x.shape[0] != self.size:
            raise ValueError(f"operator of size {self.size} applied to shape {x.shape}")
        flip = {"scale": "scale", "mul": "mul_t", "mul_t": "mul"}
        adj = [(flip[k], f) for k, f in reversed(self.factors())]
        return self._run(adj, x)

    def with_matrix(self, matrix: SparseBinaryMatrix) -> "NormalizedOperator":
        """Same normalisers, different incidence matrix (used for dropout)."""
        if matrix.shape != self.matrix.shape:
            raise ValueError("replacement matrix must keep the shape")
        return replace(self, matrix=matrix)

    def to_dense(self) -> np.ndarray:
        return self.apply(np.eye(self.size))


def build_co_interaction(rows: SparseBinaryMatrix, n_threshold: int) -> SparseBinaryMatrix:
    """Link two row entities when they share strictly more than ``n_threshold`` columns.

    The diagonal is always 1. Overlaps are accumulated one row at a time through
    the transpose, so no dense square intermediate is formed.
    """
    n = rows.n_rows
    by_col = sparse.transpose(rows)
    out_rows: list[np.ndarray] = []
    out_cols: list[np.ndarray] = []
    for a in range(n):
        cols, _ = rows.row(a)
        if len(cols) > n_threshold:
            neighbours = np.concatenate([by_col.row(c)[0] for c in cols])
            partners, counts = np.unique(neighbours, return_counts=True)
            partners = partners[counts > n_threshold]
        else:
            partners = np.zeros(0, dtype=np.int64)
        out_rows.append(np.full(len(partners), a, dtype=np.int64))
        out_cols.append(partners)
    diag = np.arange(n, dtype=np.int64)
    r = np.concatenate(out_rows + [diag])
    c = np.concatenate(out_cols + [diag])
    return sparse.binarize(sparse.from_arrays(r, c, 1.0, n, n))


def assemble(
    a_ub: SparseBinaryMatrix,
    a_ui: SparseBinaryMatrix,
    a_bi: SparseBinaryMatrix,
    cfg: HypergraphConfig = HypergraphConfig(),
    *,
    zero_uu: bool = False,
    zero_bb: bool = False,
) -> CompleteHypergraph:
    """Lay out the nine blocks of the complete hypergraph.

    ``a_ub`` should be the training interactions only; the user-user and
    bundle-bundle blocks are derived from it.
    """
    n_users, n_bundles = a_ub.shape
    n_items = a_ui.n_cols
    if a_ui.n_rows != n_users:
        raise ValueError(f"a_ui has {a_ui.n_rows} rows but a_ub has {n_users} users")
    if a_bi.shape != (n_bundles, n_items):
        raise ValueError(f"a_bi has shape {a_bi.shape}, expected {(n_bundles, n_items)}")

    h_uu = sparse.zeros(n_users, n_users) if zero_uu else build_co_interaction(a_ub, cfg.n_threshold)
    h_bb = (
        sparse.zeros(n_bundles, n_bundles)
        if zero_bb
        else build_co_interaction(sparse.transpose(a_ub), cfg.n_threshold)
    )
    h_ii = sparse.identity(n_items) if cfg.ii_mode == "identity" else sparse.zeros(n_items, n_items)
    h = sparse.block(
        [
            [h_uu, a_ui, a_ub],
            [sparse.transpose(a_ui), h_ii, sparse.transpose(a_bi)],
            [sparse.transpose(a_ub), a_bi, h_bb],
        ]
    )
    return CompleteHypergraph(h, n_users, n_items, n_bundles)


def normalize_hypergraph(hg: CompleteHypergraph) -> NormalizedOperator:
    """``D_V^-1/2 H D_E^-1/2 H^T D_V^-1/2`` with node degrees from rows, edge degrees from columns."""
    h = hg.h
    return NormalizedOperator(
        h, _inv_sqrt(sparse.row_degrees(h)), _inv_sqrt(sparse.col_degrees(h))
    )


def normalize_ub(a_ub: SparseBinaryMatrix) -> tuple[NormalizedOperator, NormalizedOperator]:
    """User-side (U x U) and bundle-side (B x B) propagation over the user-bundle graph."""
    dv = _inv_sqrt(sparse.row_degrees(a_ub))
    de = _inv_sqrt(sparse.col_degrees(a_ub))
    return NormalizedOperator(a_ub, dv, de), NormalizedOperator(a_ub, de, dv, transposed=True)


def _filter(hg: CompleteHypergraph, drop: np.ndarray) -> CompleteHypergraph:
    h = hg.h
    keep = ~drop
    m = sparse.from_arrays(
        h.row_indices[keep], h.col_indices[keep], h.values[keep], h.n_rows, h.n_cols
    )
    return replace(hg, h=m)


def with_blocks_zeroed(
    hg: CompleteHypergraph, *, uu: bool = False, bb: bool = False
) -> CompleteHypergraph:
    """Copy of ``hg`` with the user-user and/or bundle-bundle block emptied (diagonal included)."""
    r, c = hg.h.row_indices, hg.h.col_indices
    drop = np.zeros(hg.h.nnz, dtype=bool)
    if uu:
        drop |= (r < hg.n_users) & (c < hg.n_users)
    if bb:
        start = hg.bundle_range.start
        drop |= (r >= start) & (c >= start)
    return _filter(hg, drop)


def with_ii_mode(hg: CompleteHypergraph, ii_mode: str) -> CompleteHypergraph:
    """Replace the item-item block by zeros or the identity."""
    items = hg.item_range
    r, c = hg.h.row_indices, hg.h.col_indices
    in_ii = (r >= items.start) & (r < items.stop) & (c >= items.start) & (c < items.stop)
    out = _filter(hg, in_ii)
    if ii_mode == "zero":
        return out
    if ii_mode != "identity":
        raise ValueError(f"unknown ii_mode {ii_mode!r}")
    h = out.h
    diag = np.arange(items.start, items.stop)
    m = sparse.from_arrays(
        np.concatenate([h.row_indices, diag]),
        np.concatenate([h.col_indices, diag]),
        np.concatenate([h.values, np.ones(len(diag))]),
        h.n_rows,
        h.n_cols,
    )
    return replace(out, h=m)


# --- binary cache -----------------------------------------------------------

CACHE_MAGIC = b"HEDH"
CACHE_VERSION = 1
# magic, version, n_rows, n_cols, nnz, U, I, B, n_threshold, ii_mode, zero_uu, zero_bb
_HEADER = struct.Struct("<4sI6QqBBB")


class CacheError(ValueError):
    pass


def _atomic_write(path: Path, chunks) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_cache(
    hg: CompleteHypergraph,
    path,
    cfg: HypergraphConfig,
    *,
    zero_uu: bool = False,
    zero_bb: bool = False,
) -> None:
    """Write ``H`` and its degree vectors. Little-endian, written atomically."""
    h = hg.h
    header = _HEADER.pack(
        CACHE_MAGIC,
        CACHE_VERSION,
        h.n_rows,
        h.n_cols,
        h.nnz,
        hg.n_users,
        hg.n_items,
        hg.n_bundles,
        cfg.n_threshold,
        cfg.ii_mode == "identity",
        zero_uu,
        zero_bb,
    )
    _atomic_write(
        Path(path),
        [
            header,
            h.row_offsets.astype("<i8").tobytes(),
            h.col_indices.astype("<i8").tobytes(),
            h.values.astype("<f8").tobytes(),
            sparse.row_degrees(h).astype("<f8").tobytes(),
            sparse.col_degrees(h).astype("<f8").tobytes(),
        ],
    )


def load_cache(path) -> tuple[CompleteHypergraph, dict]:
    """Read a cache; returns the hypergraph and the construction settings stored with it."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CacheError(f"{path}: truncated header")
    magic, version, n_rows, n_cols, nnz, u, i, b, n_thr, ii, zuu, zbb = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise CacheError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 8 * ((n_rows + 1) + 2 * nnz + n_rows + n_cols)
    if len(raw) != expected:
        raise CacheError(f"{path}: size {len(raw)} does not match header ({expected})")
    off = _HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).astype(dtype[1:])
        off += 8 * count
        return arr

    offsets = take("<i8", n_rows + 1)
    cols = take("<i8", nnz)
    vals = take("<f8", nnz)
    h = SparseBinaryMatrix(n_rows, n_cols, offsets, cols, vals)
    meta = {
        "n_threshold": n_thr,
        "ii_mode": "identity" if ii else "zero",
        "zero_uu": bool(zuu),
        "zero_bb": bool(zbb),
    }
    return CompleteHypergraph(h, u, i, b), meta
