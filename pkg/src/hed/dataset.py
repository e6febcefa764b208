"""Loading user/item/bundle interaction pair files and splitting them."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sparse import SparseBinaryMatrix, binarize, from_arrays

__all__ = [
    "DatasetError",
    "InteractionDataset",
    "Split",
    "DatasetStats",
    "load_interaction_pairs",
    "write_interaction_pairs",
    "load_dataset",
    "split_train_test",
    "dataset_stats",
    "write_stats_csv",
    "remap_ids",
    "write_id_map",
]


class DatasetError(ValueError):
    """Malformed input files or inconsistent shapes."""
    pass


@dataclass(frozen=True)
class InteractionDataset:
    n_users: int
    n_items: int
    n_bundles: int
    a_ub: SparseBinaryMatrix
    a_ui: SparseBinaryMatrix
    a_bi: SparseBinaryMatrix

    def __post_init__(self):
        expected = {
            "a_ub": (self.n_users, self.n_bundles),
            "a_ui": (self.n_users, self.n_items),
            "a_bi": (self.n_bundles, self.n_items),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DatasetError(f"{name} has shape {got}, expected {shape}")


@dataclass(frozen=True)
class Split:
    train: SparseBinaryMatrix
    test: SparseBinaryMatrix
    seed: int | None
    method: str = "pair-bernoulli"


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_items: int
    n_bundles: int
    nnz_ub: int
    nnz_ui: int
    nnz_bi: int
    density_ub: float
    density_ui: float
    density_bi: float

    def as_rows(self) -> list[tuple[str, float | int]]:
        return list(self.__dict__.items())


def _binary(rows, cols, n_rows, n_cols) -> SparseBinaryMatrix:
    # duplicates were summed; clamp back to a binary matrix
    return binarize(from_arrays(rows, cols, 1.0, n_rows, n_cols))


def load_interaction_pairs(path, n_rows: int, n_cols: int) -> SparseBinaryMatrix:
    """Read ``row<ws>col`` lines into a binary ``n_rows x n_cols`` matrix.

    Blank lines are skipped; repeated pairs collapse to a single 1.
    """
    path = Path(path)
    rows: list[int] = []
    cols: list[int] = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise DatasetError(f"{path}:{lineno}: expected two ids, got {line.strip()!r}")
            try:
                r, c = int(parts[0]), int(parts[1])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-integer id in {line.strip()!r}") from None
            if not (0 <= r < n_rows and 0 <= c < n_cols):
                raise DatasetError(
                    f"{path}:{lineno}: pair ({r}, {c}) outside bounds ({n_rows}, {n_cols})"
                )
            rows.append(r)
            cols.append(c)
    return _binary(np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), n_rows, n_cols)


def write_interaction_pairs(m: SparseBinaryMatrix, path) -> None:
    with Path(path).open("w") as fh:
        for r, c in zip(m.row_indices.tolist(), m.col_indices.tolist()):
            fh.write(f"{r}\t{c}\n")


def load_dataset(
    user_bundle, user_item, bundle_item, n_users: int, n_items: int, n_bundles: int
) -> InteractionDataset:
    return InteractionDataset(
        n_users,
        n_items,
        n_bundles,
        load_interaction_pairs(user_bundle, n_users, n_bundles),
        load_interaction_pairs(user_item, n_users, n_items),
        load_interaction_pairs(bundle_item, n_bundles, n_items),
    )


def split_train_test(a_ub: SparseBinaryMatrix, train_fraction: float, seed: int) -> Split:
    """Send each stored pair to train with probability ``train_fraction``."""
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError(f"train_fraction must be in (0, 1], got {train_fraction}")
    rng = np.random.default_rng(seed)
    to_train = rng.random(a_ub.nnz) < train_fraction
    rows, cols = a_ub.row_indices, a_ub.col_indices
    train = _binary(rows[to_train], cols[to_train], a_ub.n_rows, a_ub.n_cols)
    test = _binary(rows[~to_train], cols[~to_train], a_ub.n_rows, a_ub.n_cols)
    return Split(train, test, seed)


def _density(m: SparseBinaryMatrix) -> float:
    cells = m.n_rows * m.n_cols
    return m.nnz / cells if cells else 0.0


def dataset_stats(ds: InteractionDataset) -> DatasetStats:
    return DatasetStats(
        ds.n_users,
        ds.n_items,
        ds.n_bundles,
        ds.a_ub.nnz,
        ds.a_ui.nnz,
        ds.a_bi.nnz,
        _density(ds.a_ub),
        _density(ds.a_ui),
        _density(ds.a_bi),
    )


def write_stats_csv(stats: DatasetStats, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "value"])
        for name, value in stats.as_rows():
            w.writerow([name, repr(value) if isinstance(value, float) else value])


def remap_ids(pairs):
    """Map arbitrary hashable ids in ``(row, col)`` pairs to dense 0-based ints.

    Ids are numbered in order of first appearance. Returns
    ``(dense_pairs, row_map, col_map)`` where the maps go raw id -> dense id.
    """
    row_map: dict = {}
    col_map: dict = {}
    dense = []
    for r, c in pairs:
        dense.append((row_map.setdefault(r, len(row_map)), col_map.setdefault(c, len(col_map))))
    return dense, row_map, col_map


def write_id_map(mapping: dict, path) -> None:
    """Write ``raw<TAB>dense`` lines, the same pair-file layout as the inputs."""
    with Path(path).open("w") as fh:
        for raw, dense in mapping.items():
            fh.write(f"{raw}\t{dense}\n")
