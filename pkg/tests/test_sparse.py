import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hed import sparse
from hed.sparse import (
    col_degrees,
    dropout_nonzeros,
    from_coo,
    identity,
    row_degrees,
    spmm,
    spmm_t,
    transpose,
    zeros,
)

from conftest import random_sparse


def dense_triple_loop(a, x):
    """Reference product straight from the definition."""
    out = np.zeros((a.shape[0], x.shape[1]))
    for i in range(a.shape[0]):
        for j in range(x.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * x[k, j]
            out[i, j] = acc
    return out


class TestFromCoo:
    def test_empty(self):
        m = from_coo([], 2, 2)
        assert m.nnz == 0
        m.check_invariants()

    def test_duplicates_are_summed(self):
        m = from_coo([(0, 0, 1), (0, 0, 2)], 1, 1)
        assert m.entries() == [(0, 0, 3.0)]

    def test_cancelling_duplicates_are_dropped(self):
        m = from_coo([(0, 1, 1.5), (0, 1, -1.5), (1, 0, 2)], 2, 2)
        assert m.entries() == [(1, 0, 2.0)]
        m.check_invariants()

    def test_identity_from_coo(self, rng):
        m = from_coo([(0, 0, 1), (1, 1, 1)], 2, 2)
        x = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(spmm(m, x), x)

    def test_out_of_range_names_entry(self):
        with pytest.raises(ValueError, match=r"entry 1 \(2, 0, 1\)"):
            from_coo([(0, 0, 1), (2, 0, 1)], 2, 2)

    def test_sorted_rows_and_columns(self):
        m = from_coo([(1, 2, 1), (0, 3, 1), (1, 0, 1), (0, 1, 1)], 2, 4)
        m.check_invariants()
        assert m.entries() == [(0, 1, 1.0), (0, 3, 1.0), (1, 0, 1.0), (1, 2, 1.0)]

    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 5), st.floats(-3, 3, width=32)),
                    max_size=40), st.randoms())
    @settings(max_examples=60, deadline=None)
    def test_permutation_invariant(self, entries, pyrandom):
        shuffled = entries[:]
        pyrandom.shuffle(shuffled)
        a, b = from_coo(entries, 5, 6), from_coo(shuffled, 5, 6)
        assert a.equals(b)
        a.check_invariants()


class TestSpmm:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(spmm(identity(3), x), x)

    def test_zero(self, rng):
        x = rng.normal(size=(3, 4))
        assert not spmm(zeros(3, 3), x).any()

    def test_random_20x20(self, rng):
        a = random_sparse(rng, 20, 20, 0.3)
        x = rng.normal(size=(20, 5))
        np.testing.assert_allclose(spmm(a, x), dense_triple_loop(a.to_dense(), x), atol=1e-12, rtol=0)

    @pytest.mark.parametrize("density", [0.1, 0.5, 1.0])
    def test_matches_dense_oracle(self, rng, density):
        for n_rows, n_cols in [(1, 1), (7, 30), (30, 30), (30, 11)]:
            a = random_sparse(rng, n_rows, n_cols, density)
            x = rng.normal(size=(n_cols, 3))
            expected = dense_triple_loop(a.to_dense(), x)
            np.testing.assert_allclose(spmm(a, x), expected, atol=1e-12, rtol=0)
            y = rng.normal(size=(n_rows, 2))
            np.testing.assert_allclose(
                spmm_t(a, y), dense_triple_loop(a.to_dense().T, y), atol=1e-12, rtol=0
            )

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError, match="dimension mismatch"):
            spmm(identity(3), rng.normal(size=(4, 2)))


class TestTranspose:
    def test_identity(self):
        assert transpose(identity(4)).equals(identity(4))

    def test_coordinate_swap(self):
        t = transpose(from_coo([(0, 1, 1)], 1, 2))
        assert t.shape == (2, 1)
        assert t.entries() == [(1, 0, 1.0)]

    def test_involution_and_invariants(self, rng):
        for density in (0.0, 0.1, 0.5, 1.0):
            a = random_sparse(rng, 13, 29, density)
            t = transpose(a)
            t.check_invariants()
            np.testing.assert_array_equal(t.to_dense(), a.to_dense().T)
            assert transpose(t).equals(a)


class TestDegrees:
    def test_identity(self):
        np.testing.assert_array_equal(row_degrees(identity(3)), [1, 1, 1])

    def test_zero_row(self):
        m = from_coo([(0, 0, 1)], 2, 2)
        assert row_degrees(m)[1] == 0
        assert col_degrees(m)[1] == 0

    def test_duality(self, rng):
        a = random_sparse(rng, 11, 17, 0.3)
        np.testing.assert_array_equal(row_degrees(a), col_degrees(transpose(a)))
        np.testing.assert_allclose(row_degrees(a), a.to_dense().sum(axis=1), atol=1e-12)


class TestDropout:
    def test_p_zero_is_identity(self, rng):
        a = random_sparse(rng, 10, 10, 0.4)
        out = dropout_nonzeros(a, 0.0, rng)
        assert out.equals(a)

    def test_survivor_scaling(self, rng):
        a = random_sparse(rng, 30, 30, 0.5, binary=True)
        out = dropout_nonzeros(a, 0.5, rng)
        assert np.all(out.values == 2.0)
        out.check_invariants()

    def test_binomial_count(self):
        rng = np.random.default_rng(7)
        a = sparse.from_arrays(np.arange(10000), np.zeros(10000, int), 1.0, 10000, 1)
        out = dropout_nonzeros(a, 0.2, rng)
        sigma = np.sqrt(10000 * 0.2 * 0.8)
        assert abs(out.nnz - 8000) <= 3 * sigma

    def test_unbiased_single_entry(self):
        rng = np.random.default_rng(11)
        a = from_coo([(0, 0, 1.0)], 1, 1)
        # p=0.1: std of the mean is sqrt(p/(1-p)/1e4) ~ 0.0033, so 1% is ~3 sigma
        draws = [dropout_nonzeros(a, 0.1, rng).values.sum() for _ in range(10_000)]
        assert abs(np.mean(draws) - 1.0) < 0.01

    def test_rejects_p_one(self, rng):
        with pytest.raises(ValueError):
            dropout_nonzeros(identity(2), 1.0, rng)

    def test_reproducible_with_seed(self):
        a = random_sparse(np.random.default_rng(0), 20, 20, 0.5)
        x = dropout_nonzeros(a, 0.3, np.random.default_rng(5))
        y = dropout_nonzeros(a, 0.3, np.random.default_rng(5))
        assert x.equals(y)


def test_block_assembly(rng):
    a = random_sparse(rng, 2, 3, 0.5)
    b = random_sparse(rng, 2, 4, 0.5)
    c = random_sparse(rng, 5, 3, 0.5)
    d = random_sparse(rng, 5, 4, 0.5)
    m = sparse.block([[a, b], [c, d]])
    m.check_invariants()
    expected = np.block([[a.to_dense(), b.to_dense()], [c.to_dense(), d.to_dense()]])
    np.testing.assert_array_equal(m.to_dense(), expected)
