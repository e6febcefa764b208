"""Top-k ranking metrics with train-interaction masking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .sparse import SparseBinaryMatrix

__all__ = [
    "MetricsReport",
    "rank_bundles",
    "recall_at_k",
    "ndcg_at_k",
    "evaluate",
    "write_metrics_csv",
    "read_metrics_csv",
]

DEFAULT_KS = (20, 40, 80)


def rank_bundles(scores: np.ndarray, train_mask: Iterable[int] | None = None) -> np.ndarray:
    """Bundle ids by descending score; ties go to the lower id; masked ids removed."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if train_mask is not None:
        masked = np.zeros(len(scores), dtype=bool)
        masked[np.asarray(list(train_mask), dtype=np.int64)] = True
        order = order[~masked[order]]
    return order


def recall_at_k(ranked: Sequence[int], test_set, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(test_set) == 0:
        raise ValueError("recall is undefined for an empty test set")
    test_set = set(test_set)
    hits = sum(1 for b in list(ranked)[:k] if b in test_set)
    return hits / len(test_set)


def ndcg_at_k(ranked: Sequence[int], test_set, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(test_set) == 0:
        raise ValueError("NDCG is undefined for an empty test set")
    test_set = set(test_set)
    dcg = sum(
        1.0 / math.log2(pos + 2) for pos, b in enumerate(list(ranked)[:k]) if b in test_set
    )
    idcg = sum(1.0 / math.log2(pos + 2) for pos in range(min(k, len(test_set))))
    return dcg / idcg


@dataclass
class MetricsReport:
    ks: tuple[int, ...]
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_evaluated_users: int
    per_user_recall: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    per_user_ndcg: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def rows(self) -> list[tuple[int, float, float]]:
        return [(k, self.recall[k], self.ndcg[k]) for k in self.ks]

    def format_table(self) -> str:
        lines = [f"{'k':>4}  {'recall':>8}  {'ndcg':>8}"]
        lines += [f"{k:>4}  {r:8.4f}  {n:8.4f}" for k, r, n in self.rows()]
        return "\n".join(lines)


def _top_k(scores: np.ndarray, kmax: int) -> np.ndarray:
    """Per-row top ``kmax`` columns, descending score, ascending id on ties.

    ``-inf`` marks masked entries; they are returned as ``-1``.
    """
    n, B = scores.shape
    part = np.argpartition(-scores, kmax - 1, axis=1)[:, :kmax]
    thresh = np.take_along_axis(scores, part, axis=1).min(axis=1)
    out = np.full((n, kmax), -1, dtype=np.int64)
    for r in range(n):
        row = scores[r]
        cand = np.flatnonzero(row >= thresh[r])
        cand = cand[np.lexsort((cand, -row[cand]))][:kmax]
        cand = cand[np.isfinite(row[cand])]
        out[r, : len(cand)] = cand
    return out


def _row_keys(m: SparseBinaryMatrix) -> np.ndarray:
    return m.row_indices * m.n_cols + m.col_indices


def evaluate(
    final_u: np.ndarray,
    final_b: np.ndarray,
    train: SparseBinaryMatrix,
    test: SparseBinaryMatrix,
    ks: Sequence[int] = DEFAULT_KS,
    *,
    chunk_size: int = 1024,
) -> MetricsReport:
    """Recall@k and NDCG@k averaged uniformly over users with at least one test bundle."""
    ks = tuple(int(k) for k in ks)
    if not ks:
        raise ValueError("ks must be nonempty")
    n_users, n_bundles = test.shape
    if any(k < 1 or k > n_bundles for k in ks):
        raise ValueError(f"every k must be in [1, {n_bundles}], got {ks}")
    kmax = max(ks)
    test_keys = _row_keys(test)  # sorted: CSR order is row-major
    n_test = np.diff(test.row_offsets)
    users = np.flatnonzero(n_test > 0)
    discounts = 1.0 / np.log2(np.arange(2, kmax + 2))
    ideal = np.concatenate([[0.0], np.cumsum(discounts)])

    recall = {k: np.zeros(len(users)) for k in ks}
    ndcg = {k: np.zeros(len(users)) for k in ks}
    train_csr = train._csr
    for lo in range(0, len(users), chunk_size):
        batch = users[lo : lo + chunk_size]
        scores = final_u[batch] @ final_b.T
        mask = train_csr[batch]
        scores[mask.nonzero()] = -np.inf
        top = _top_k(scores, kmax)
        keys = batch[:, None] * n_bundles + top
        pos = np.searchsorted(test_keys, keys)
        pos = np.minimum(pos, len(test_keys) - 1)
        hits = (test_keys[pos] == keys) & (top >= 0)
        sizes = n_test[batch]
        for k in ks:
            h = hits[:, :k]
            recall[k][lo : lo + len(batch)] = h.sum(axis=1) / sizes
            dcg = (h * discounts[:k]).sum(axis=1)
            ndcg[k][lo : lo + len(batch)] = dcg / ideal[np.minimum(sizes, k)]

    n = len(users)
    return MetricsReport(
        ks,
        {k: math.fsum(recall[k]) / n if n else 0.0 for k in ks},
        {k: math.fsum(ndcg[k]) / n if n else 0.0 for k in ks},
        n,
        {k: recall[k] for k in ks},
        {k: ndcg[k] for k in ks},
    )


def write_metrics_csv(report: MetricsReport, path, metadata: Mapping[str, object] = ()) -> None:
    """CSV with ``# key=value`` metadata lines ahead of the ``k,recall,ndcg`` table."""
    with Path(path).open("w", newline="") as fh:
        for key, value in dict(metadata).items():
            fh.write(f"# {key}={value}\n")
        w = csv.writer(fh)
        w.writerow(["k", "recall", "ndcg"])
        for k, r, n in report.rows():
            w.writerow([k, repr(r), repr(n)])


def read_metrics_csv(path) -> tuple[dict[str, str], list[tuple[int, float, float]]]:
    meta: dict[str, str] = {}
    body = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            meta[key] = value
        else:
            body.append(line)
    rows = [(int(r["k"]), float(r["recall"]), float(r["ndcg"])) for r in csv.DictReader(body)]
    return meta, rows
