from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunefl import sparse
from prunefl.sparse import Layout, SparseMatrix, sparse_from_dense, spmm, storage_cost


def random_sparse_dense(rng, rows, cols, density):
    m = rng.normal(size=(rows, cols))
    m[rng.random((rows, cols)) >= density] = 0.0
    return m


class TestConstruction:
    def test_zero_matrix(self):
        s = sparse_from_dense(np.zeros((3, 3)))
        assert s.nnz == 0
        np.testing.assert_array_equal(s.to_dense(), np.zeros((3, 3)))

    def test_identity(self):
        r, c, v = sparse_from_dense(np.eye(3)).coords()
        assert list(zip(r, c, v)) == [(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]

    def test_round_trip_random(self, rng):
        m = rng.normal(size=(8, 5))
        m[rng.random((8, 5)) < 0.4] = 0.0
        np.testing.assert_array_equal(sparse_from_dense(m).to_dense(), m)

    @pytest.mark.parametrize("layout", list(Layout))
    def test_round_trip_either_layout(self, rng, layout):
        m = random_sparse_dense(rng, 9, 7, 0.5)
        s = sparse_from_dense(m, layout)
        assert s.layout is layout
        np.testing.assert_array_equal(s.to_dense(), m)

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError, match="sorted"):
            SparseMatrix(2, 2, [1, 0], [0, 0], [1.0, 2.0])

    def test_rejects_duplicates(self):
        with pytest.raises(ValueError, match="unique"):
            SparseMatrix(2, 2, [0, 0], [1, 1], [1.0, 2.0])

    def test_rejects_out_of_bounds(self):
        with pytest.raises(ValueError, match="bounds"):
            SparseMatrix(2, 2, [2], [0], [1.0])

    def test_rejects_explicit_zero(self):
        with pytest.raises(ValueError, match="zeros"):
            SparseMatrix(2, 2, [0], [0], [0.0])

    def test_rejects_non_matrix(self):
        with pytest.raises(ValueError):
            sparse_from_dense(np.zeros(3))

    def test_immutable(self):
        s = sparse_from_dense(np.eye(2))
        with pytest.raises(ValueError):
            s.coords()[2][0] = 5.0

    def test_tuple_layout_dimension_limit(self):
        with pytest.raises(ValueError, match="65535"):
            SparseMatrix(1, 70000, [0], [3], [1.0], Layout.COORD_TUPLE)
        # automatic choice falls back to the bitmap
        s = SparseMatrix(1, 70000, [0], [3], [1.0])
        assert s.layout is Layout.BITMAP


class TestSpmm:
    def test_identity(self, rng):
        d = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(spmm(sparse_from_dense(np.eye(4)), d), d)

    def test_zero(self, rng):
        out = spmm(sparse_from_dense(np.zeros((5, 4))), rng.normal(size=(4, 3)))
        np.testing.assert_array_equal(out, np.zeros((5, 3)))

    def test_dense_oracle(self, rng):
        a = random_sparse_dense(rng, 6, 6, 0.3)
        d = rng.normal(size=(6, 2))
        np.testing.assert_allclose(spmm(sparse_from_dense(a), d), a @ d, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            spmm(sparse_from_dense(np.eye(3)), np.ones((4, 2)))

    @settings(max_examples=60, deadline=None)
    @given(
        rows=st.integers(1, 64),
        cols=st.integers(1, 64),
        n=st.integers(1, 8),
        density=st.floats(0.0, 1.0),
        seed=st.integers(0, 2**31),
    )
    def test_agreement_property(self, rows, cols, n, density, seed):
        rng = np.random.default_rng(seed)
        a = random_sparse_dense(rng, rows, cols, density)
        d = rng.normal(size=(cols, n))
        np.testing.assert_allclose(spmm(sparse_from_dense(a), d), a @ d, rtol=0, atol=1e-12)


class TestStorage:
    def test_half_density_reference_point(self):
        rep = storage_cost(3200, 1600)
        assert rep.ratio == 0.53125
        assert rep.chosen_layout is Layout.BITMAP

    def test_tie_goes_to_bitmap(self):
        rep = storage_cost(3200, 100)
        assert rep.tuple_bytes == rep.bitmap_bytes
        assert Fraction(rep.sparse_bytes, rep.dense_bytes) == Fraction(1, 16)
        assert rep.chosen_layout is Layout.BITMAP

    def test_very_sparse_uses_tuples(self):
        rep = storage_cost(100000, 100)
        assert rep.ratio == pytest.approx(0.002, abs=0)
        assert rep.chosen_layout is Layout.COORD_TUPLE

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            storage_cost(10, 11)
        with pytest.raises(ValueError):
            storage_cost(10, -1)

    @settings(max_examples=300, deadline=None)
    @given(data=st.data())
    def test_byte_formulas_exact(self, data):
        total = data.draw(st.integers(1, 10**6))
        nnz = data.draw(st.integers(0, total))
        rep = storage_cost(total, nnz)
        assert rep.tuple_bytes == 8 * nnz
        assert rep.bitmap_bytes == -(-total // 8) + 4 * nnz
        assert rep.sparse_bytes == min(rep.tuple_bytes, rep.bitmap_bytes)
        assert rep.dense_bytes == 4 * total
        # layout switch exactly at density 1/32, ties to bitmap
        tuple_cheaper = Fraction(nnz, total) < Fraction(1, 32) if total % 8 == 0 else None
        if tuple_cheaper is not None:
            assert (rep.chosen_layout is Layout.COORD_TUPLE) == tuple_cheaper

    def test_amortized_traffic(self):
        # one reconfiguration round (1 + d) and 49 pruned rounds (2d each)
        assert sparse.amortized_comm_ratio(0.0, 50) == pytest.approx(0.02)
        assert sparse.amortized_comm_ratio(0.1, 50) == pytest.approx((1.1 + 98 * 0.1) / 50)
        assert sparse.amortized_comm_ratio(0.3, 50) == pytest.approx(0.02 + 1.98 * 0.3)
        assert sparse.amortized_comm_ratio(1.0, 1) == 2.0

    def test_worthwhile_threshold(self):
        assert sparse.is_sparse_worthwhile(1 / 64)
        assert not sparse.is_sparse_worthwhile(1 / 32)


class TestSerialization:
    @pytest.mark.parametrize("layout", list(Layout))
    def test_round_trip(self, rng, layout):
        m = random_sparse_dense(rng, 12, 10, 0.2).astype(np.float32).astype(np.float64)
        s = sparse_from_dense(m, layout)
        buf = s.to_bytes()
        assert len(buf) == sparse.HEADER_BYTES + (
            s.storage().tuple_bytes if layout is Layout.COORD_TUPLE else s.storage().bitmap_bytes
        )
        back = SparseMatrix.from_bytes(buf)
        assert back.layout is layout
        np.testing.assert_array_equal(back.to_dense(), m)

    def test_bitmap_is_lsb_first(self):
        s = SparseMatrix(1, 8, [0], [1], [1.0], Layout.BITMAP)
        assert s.bitmap().tolist() == [0b10]
