"""Low-discrepancy layer tests: Halton, Box-Muller, psi map, Hilbert curve."""

import itertools

import numpy as np
import pytest
from numpy.random import default_rng

from nhf.qmc import (
    HaltonStream,
    HilbertMap,
    first_primes,
    gaussian_block_from_uniform,
    gaussian_from_uniform,
    halton_point,
    hilbert_cell_of_index,
    hilbert_index,
    hilbert_index_int,
    hilbert_sort,
    psi_map,
    radical_inverse,
    star_discrepancy_grid,
)
from nhf.qmc import _hilbert_cell_index


class TestHalton:
    def test_first_primes(self):
        assert first_primes(6) == [2, 3, 5, 7, 11, 13]

    def test_radical_inverse_base2(self):
        assert radical_inverse(0, 2) == 0.0
        assert [radical_inverse(i, 2) for i in (1, 2, 3)] == [0.5, 0.25, 0.75]

    def test_point_examples(self):
        stream = HaltonStream(2)
        np.testing.assert_allclose(halton_point(0, stream), [0.0, 0.0])
        np.testing.assert_allclose(halton_point(1, stream), [0.5, 1.0 / 3.0])

    def test_stream_advances_and_skips_zero(self):
        stream = HaltonStream(1)
        block = stream.next_block(3)
        np.testing.assert_allclose(block.ravel(), [0.5, 0.25, 0.75])
        assert stream.next_index == 4
        more = stream.next_block(1)
        np.testing.assert_allclose(more.ravel(), [0.125])

    def test_points_in_unit_cube(self):
        stream = HaltonStream(4)
        block = stream.next_block(500)
        assert block.shape == (500, 4)
        assert (block >= 0).all() and (block < 1).all()

    def test_star_discrepancy_beats_random(self):
        stream = HaltonStream(2)
        halton_d = star_discrepancy_grid(stream.next_block(1024))
        rng = default_rng(0)
        random_d = np.mean([star_discrepancy_grid(rng.random((1024, 2)))
                            for _ in range(20)])
        assert halton_d < random_d


class TestBoxMuller:
    def test_unit_u1_gives_origin(self):
        z1, z2 = gaussian_from_uniform(1.0, 0.37)
        assert z1 == 0.0 and z2 == 0.0

    def test_known_values(self):
        z1, z2 = gaussian_from_uniform(np.exp(-0.5), 0.0)
        assert z1 == pytest.approx(1.0, abs=1e-14)
        assert z2 == pytest.approx(0.0, abs=1e-14)
        z1, z2 = gaussian_from_uniform(np.exp(-0.5), 0.25)
        assert z1 == pytest.approx(0.0, abs=1e-14)
        assert z2 == pytest.approx(1.0, abs=1e-14)

    def test_rejects_zero_u1(self):
        with pytest.raises(ValueError):
            gaussian_from_uniform(0.0, 0.5)

    def test_halton_pair_statistics(self):
        stream = HaltonStream(2)
        block = stream.next_block(2 ** 14)
        z1, z2 = gaussian_from_uniform(1.0 - block[:, 0], block[:, 1])
        for channel in (z1, z2):
            assert abs(channel.mean()) < 0.02
            assert abs(channel.var() - 1.0) < 0.05

    def test_block_transform_shape(self):
        block = default_rng(1).random((50, 4))
        out = gaussian_block_from_uniform(block)
        assert out.shape == (50, 4)
        with pytest.raises(ValueError):
            gaussian_block_from_uniform(default_rng(2).random((5, 3)))


class TestPsiMap:
    def test_two_particle_example(self):
        out = psi_map(np.array([[0.0], [2.0]]), [0.5, 0.5])
        # mean 1, variance 1 -> anchors -1 and 3, denominator 4
        assert out[0, 0] == pytest.approx(1.0 / (1.0 + np.exp(-0.25)), abs=1e-12)
        assert out[1, 0] == pytest.approx(1.0 / (1.0 + np.exp(-0.75)), abs=1e-12)
        assert out[0, 0] == pytest.approx(0.5622, abs=5e-5)
        assert out[1, 0] == pytest.approx(0.6792, abs=5e-5)

    def test_lower_anchor_maps_to_half(self):
        thetas = np.array([[0.0], [2.0]])
        w = np.array([0.5, 0.5])
        lo = 1.0 - 2.0 * 1.0
        out = psi_map(np.vstack([thetas, [[lo]]]), np.array([0.5, 0.5, 0.0]))
        assert out[2, 0] == pytest.approx(0.5, abs=1e-12)

    def test_open_unit_interval_and_monotone(self):
        rng = default_rng(3)
        thetas = rng.standard_normal((40, 3)) * 5
        w = rng.random(40)
        w /= w.sum()
        out = psi_map(thetas, w)
        assert (out > 0).all() and (out < 1).all()
        order = np.argsort(thetas[:, 1])
        assert (np.diff(out[order, 1]) >= 0).all()

    def test_degenerate_spread_floored(self):
        out = psi_map(np.full((4, 2), 3.0), np.full(4, 0.25))
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, 0.5)

    def test_extreme_values_saturate(self):
        thetas = np.array([[0.0], [2.0], [1e9], [-1e9]])
        w = np.array([0.5, 0.5, 0.0, 0.0])
        out = psi_map(thetas, w)
        assert out[2, 0] > 1.0 - 1e-12
        assert out[3, 0] < 1e-12


class TestHilbert:
    def test_validation(self):
        with pytest.raises(ValueError):
            HilbertMap(4, 16)  # 64 bits > 62
        with pytest.raises(ValueError):
            hilbert_index((0.5, 1.5), HilbertMap(2, 4))

    def test_one_dimensional_identity(self):
        hmap = HilbertMap(1, 10)
        for v in (0.0, 0.123, 0.5, 0.999):
            assert abs(hilbert_index((v,), hmap) - v) <= 2.0 ** -10

    def test_origin_is_curve_start(self):
        for d in (2, 3):
            assert hilbert_index((0.0,) * d, HilbertMap(d, 3)) == 0.0

    def test_four_cells_connected(self):
        hmap = HilbertMap(2, 1)
        centers = [(0.25, 0.25), (0.25, 0.75), (0.75, 0.75), (0.75, 0.25)]
        values = sorted(hilbert_index(c, hmap) for c in centers)
        assert values == [0.0, 0.25, 0.5, 0.75]

    @pytest.mark.parametrize("d,b", [(d, b) for d in (2, 3) for b in (1, 2, 3)])
    def test_bijective_and_adjacent(self, d, b):
        n = 1 << b
        seen = {}
        for cell in itertools.product(range(n), repeat=d):
            h = _hilbert_cell_index(cell, b)
            assert h not in seen
            seen[h] = cell
            assert hilbert_cell_of_index(h, d, b) == list(cell)
        assert sorted(seen) == list(range(n ** d))
        for h in range(n ** d - 1):
            steps = sum(abs(a - c) for a, c in zip(seen[h], seen[h + 1]))
            assert steps == 1  # consecutive cells share a face

    def test_integer_index_matches_float(self):
        hmap = HilbertMap(3, 4)
        rng = default_rng(4)
        for _ in range(20):
            p = rng.random(3)
            assert hilbert_index(p, hmap) == hilbert_index_int(p, hmap) / 2.0 ** 12


class TestHilbertSort:
    def test_single_particle(self):
        perm = hilbert_sort(np.array([[0.3]]), [1.0], HilbertMap(1, 16))
        np.testing.assert_array_equal(perm, [0])

    def test_one_dimensional_sort(self):
        perm = hilbert_sort(np.array([[3.0], [1.0], [2.0]]), np.full(3, 1 / 3),
                            HilbertMap(1, 16))
        np.testing.assert_array_equal(perm, [1, 2, 0])

    def test_sorted_indices_nondecreasing(self):
        rng = default_rng(5)
        thetas = rng.standard_normal((64, 2))
        w = rng.random(64)
        w /= w.sum()
        hmap = HilbertMap.for_dimension(2)
        perm = hilbert_sort(thetas, w, hmap)
        psi = psi_map(thetas, w)
        keys = [hilbert_index(psi[i], hmap) for i in perm]
        assert (np.diff(keys) >= 0).all()
        assert sorted(perm) == list(range(64))
