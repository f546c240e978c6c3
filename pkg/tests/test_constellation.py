"""Constellation init, normalization invariants, nested subsets, tables."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_max_rel_error
from e2e_ofdm import autodiff as ad
from e2e_ofdm.constellation import (Constellation, export_table, gray_code, import_table,
                                    normalize_node, normalize_points, qam_points, subset,
                                    subset_indices)


def crandn(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


class TestQam:
    def test_qpsk_values(self):
        s = 1 / np.sqrt(2)
        np.testing.assert_allclose(qam_points(2), [s + 1j * s, s - 1j * s, -s + 1j * s, -s - 1j * s])

    @pytest.mark.parametrize("m", [1, 2, 3, 4, 6, 8])
    def test_unit_power_zero_mean(self, m):
        p = qam_points(m)
        assert np.mean(np.abs(p) ** 2) == pytest.approx(1.0, abs=1e-12)
        assert abs(p.mean()) < 1e-12
        assert len(np.unique(np.round(p, 9))) == 1 << m

    @pytest.mark.parametrize("m", [2, 4, 6, 8])
    def test_gray_neighbours(self, m):
        # nearest neighbours on the square grid differ in exactly one bit
        p = qam_points(m)
        d = np.abs(p[:, None] - p[None, :])
        dmin = d[d > 0].min()
        i, j = np.nonzero(np.isclose(d, dmin))
        assert len(i) > 0
        assert all(bin(a ^ b).count("1") == 1 for a, b in zip(i, j))

    def test_gray_code(self):
        g = gray_code(4)
        assert sorted(g) == list(range(16))
        assert all(bin(a ^ b).count("1") == 1 for a, b in zip(g[:-1], g[1:]))

    def test_bad_order(self):
        with pytest.raises(ValueError):
            qam_points(0)


class TestNormalize:
    def test_random_clouds(self):
        r = np.random.default_rng(0)
        for _ in range(1000):
            c = normalize_points(crandn(r, 16) * r.uniform(0.1, 10) + crandn(r, 1) * 3)
            assert abs(c.mean()) <= 1e-9
            assert abs(np.mean(np.abs(c) ** 2) - 1) <= 1e-9

    @settings(deadline=None)
    @given(st.integers(0, 10_000), st.floats(-50, 50), st.floats(-50, 50))
    def test_idempotent_and_shift_invariant(self, seed, sr, si):
        c = crandn(np.random.default_rng(seed), 8)
        n = normalize_points(c)
        np.testing.assert_allclose(normalize_points(n), n, atol=1e-12)
        np.testing.assert_allclose(normalize_points(c + complex(sr, si)), n, atol=1e-12)

    def test_qpsk_fixed_point(self):
        np.testing.assert_allclose(normalize_points(qam_points(2)), qam_points(2), atol=1e-15)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            normalize_points(np.full(4, 1 + 1j))

    def test_node_matches_array(self, rng):
        c = crandn(rng, 16)
        g = ad.Graph()
        out = normalize_node(g.constant(c.real), g.constant(c.imag)).value
        np.testing.assert_allclose(out[:, 0] + 1j * out[:, 1], normalize_points(c), atol=1e-14)

    def test_gradient(self, rng):
        cons = Constellation(3, *(lambda z: (z.real, z.imag))(crandn(rng, 8)))
        w = rng.normal(size=(8, 2))
        params = {p.name: p for p in cons.parameters}

        def build(g, nodes):
            out = normalize_node(nodes["const.c_re"], nodes["const.c_im"])
            return ad.sum(ad.square(out) * g.constant(w) + out)

        assert fd_max_rel_error(build, params, rng) <= 1e-4


class TestSubsets:
    def test_index_set(self):
        np.testing.assert_array_equal(subset_indices(2, 6), [0, 16, 32, 48])
        np.testing.assert_array_equal(subset_indices(6, 6), np.arange(64))

    @given(st.integers(1, 8), st.integers(0, 4))
    def test_index_formula(self, m, extra):
        m_max = m + extra
        np.testing.assert_array_equal(subset_indices(m, m_max), np.arange(1 << m) * 2 ** (m_max - m))

    def test_nesting(self, rng):
        pts = normalize_points(crandn(rng, 256))
        sets = [set(np.round(subset(pts, m).points, 12)) for m in (2, 4, 6, 8)]
        for small, big in zip(sets[:-1], sets[1:]):
            assert small < big

    @pytest.mark.parametrize("m_max", [4, 6, 8])
    def test_qam_order2_subset_is_qpsk(self, m_max):
        sub = normalize_points(subset(qam_points(m_max), 2).points)
        np.testing.assert_allclose(sub, qam_points(2), atol=1e-12)

    def test_full_order_power_is_one(self, rng):
        c = Constellation(4, rng.normal(size=16), rng.normal(size=16))
        assert c.subset_power(4) == pytest.approx(1.0, abs=1e-12)
        assert c.subset(4).points.shape == (16,)

    def test_qpsk_subset_of_16qam_power(self):
        # the four inner points: amplitude 1 on each rail of a {1, 3} grid scaled by 1/sqrt(10)
        assert Constellation.init_qam(4).subset_power(2) == pytest.approx(0.2, abs=1e-12)

    def test_labels(self):
        lab = subset(qam_points(4), 2).labels()
        np.testing.assert_array_equal(lab, [[0, 0], [0, 1], [1, 0], [1, 1]])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            subset_indices(5, 4)


class TestConstellation:
    def test_wrong_size(self):
        with pytest.raises(ValueError):
            Constellation(2, np.zeros(3), np.zeros(3))

    def test_parameters_partition(self):
        c = Constellation.init_qam(2)
        assert {p.partition for p in c.parameters} == {"constellation"}
        np.testing.assert_allclose(c.normalized(), qam_points(2), atol=1e-15)


class TestTables:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        pts = normalize_points(crandn(rng, 16))
        path = tmp_path / "c.tsv"
        export_table(pts, 4, path)
        idx, back, labels = import_table(path)
        np.testing.assert_array_equal(back, pts)
        np.testing.assert_array_equal(idx, np.arange(16))
        assert labels[5] == "0101"

    def test_subset_table(self):
        idx, back, labels = import_table(export_table(qam_points(4), 2))
        np.testing.assert_array_equal(idx, [0, 4, 8, 12])
        assert labels == ["00", "01", "10", "11"]
        np.testing.assert_array_equal(back, qam_points(4)[idx])
