import numpy as np
import pytest

from hed.sparse import from_arrays


def random_sparse(rng, n_rows, n_cols, density, binary=False):
    mask = rng.random((n_rows, n_cols)) < density
    r, c = np.nonzero(mask)
    vals = np.ones(len(r)) if binary else rng.uniform(0.5, 2.0, len(r)) * rng.choice([-1, 1], len(r))
    return from_arrays(r, c, vals, n_rows, n_cols)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
