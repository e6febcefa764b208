"""Planted block-structure datasets for tests and smoke runs."""

from __future__ import annotations

import numpy as np

from .dataset import InteractionDataset
from .sparse import from_arrays

__all__ = ["planted_dataset"]


def _planted(rng, n_rows, n_cols, groups_r, groups_c, p_in, p_out, min_per_row=1):
    same = groups_r[:, None] == groups_c[None, :]
    dense = rng.random((n_rows, n_cols)) < np.where(same, p_in, p_out)
    for r in range(n_rows):
        if dense[r].sum() < min_per_row:
            own = np.flatnonzero(same[r]) if same[r].any() else np.arange(n_cols)
            dense[r, rng.choice(own)] = True
        if dense[r].all():
            dense[r, rng.integers(n_cols)] = False
    r, c = np.nonzero(dense)
    return from_arrays(r, c, 1.0, n_rows, n_cols)


def planted_dataset(
    n_users: int,
    n_items: int,
    n_bundles: int,
    n_groups: int = 2,
    seed: int = 0,
    *,
    p_in: float = 0.6,
    p_out: float = 0.05,
) -> InteractionDataset:
    """Users, items and bundles each split into ``n_groups`` taste groups.

    Interactions inside a group happen with probability ``p_in``, across groups
    with ``p_out``. Every user and bundle gets at least one interaction and no
    user interacts with every bundle.
    """
    rng = np.random.default_rng(seed)
    gu = np.arange(n_users) % n_groups
    gi = np.arange(n_items) % n_groups
    gb = np.arange(n_bundles) % n_groups
    a_ub = _planted(rng, n_users, n_bundles, gu, gb, p_in, p_out)
    a_ui = _planted(rng, n_users, n_items, gu, gi, p_in, p_out)
    a_bi = _planted(rng, n_bundles, n_items, gb, gi, p_in, 0.0)
    return InteractionDataset(n_users, n_items, n_bundles, a_ub, a_ui, a_bi)
