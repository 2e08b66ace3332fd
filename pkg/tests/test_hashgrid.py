import numpy as np
import pytest
from scipy import stats

from gsdyn.engine import Tensor, checked_mode, finite_diff_check, parameter, precision
from gsdyn.engine import tensor as T
from gsdyn.hashgrid import PROJECTIONS, GridConfig, HashGridSet, growth_factor, hash_index, level_resolution

import oracles

SMALL = GridConfig(levels=2, features=2, log2_table_size=6, n_min=4, n_max=8, n_min_t=3, n_max_t=5)


@pytest.fixture(autouse=True)
def _f64():
    with precision(64):
        yield


def grid(cfg=SMALL, seed=0, scale=1.0):
    g = HashGridSet(cfg, np.random.default_rng(seed))
    for t in g.tables.values():
        t.data[:] = np.random.default_rng(seed + 1).normal(0, scale, size=t.shape)
    return g


class TestResolution:
    def test_examples(self):
        assert level_resolution(1, 8, 2.0) == 16
        assert level_resolution(3, 8, 1.5) == 27
        assert level_resolution(2, 4, 1.5) == 9

    def test_floor_of_two(self):
        assert level_resolution(0, 1, 1.1) == 2

    def test_default_progression_reaches_top(self):
        cfg = GridConfig()
        assert cfg.b == pytest.approx(32 ** (1 / 7))
        assert [cfg.resolution(l, "x") for l in (0, cfg.levels - 1)] == [8, 256]
        assert [cfg.resolution(l, "t") for l in (0, cfg.levels - 1)] == [4, 64]
        res = [cfg.resolution(l, "y") for l in range(cfg.levels)]
        assert res == sorted(res) and len(set(res)) == cfg.levels

    def test_single_level_growth(self):
        assert growth_factor(8, 256, 1) == 1.0


class TestHashIndex:
    def test_examples(self):
        assert hash_index([0, 0, 0], 2**15) == 0
        assert hash_index([1, 0, 0], 2**15) == 1

    def test_matches_oracle(self):
        cells = np.random.default_rng(0).integers(0, 5000, size=(200, 3))
        got = hash_index(cells, 2**15)
        assert list(got) == [oracles.hash_cell(c, 2**15) for c in cells]

    def test_uniform_occupancy(self):
        size = 2**15
        cells = np.random.default_rng(1).integers(0, 2**20, size=(10**6, 3))
        counts = np.bincount(hash_index(cells, size), minlength=size)
        assert stats.chisquare(counts).pvalue > 0.001

    def test_table_size_power_of_two(self):
        with pytest.raises(ValueError, match="power of two"):
            hash_index([1, 2, 3], 1000)


class TestEncode:
    def test_dimensions(self):
        g = grid(GridConfig(levels=3, features=4, log2_table_size=8))
        h_s, h_t = g.encode(Tensor(np.random.default_rng(0).uniform(size=(5, 4))))
        assert h_s.shape == (5, 12) and h_t.shape == (5, 36)

    def test_constant_tables(self):
        g = grid()
        for t in g.tables.values():
            t.data[:] = 0.7
        h_s, h_t = g.encode(Tensor(np.random.default_rng(0).uniform(size=(9, 4))))
        np.testing.assert_allclose(h_s.data, 0.7, atol=1e-15)
        np.testing.assert_allclose(h_t.data, 0.7, atol=1e-15)

    def test_vertex_query(self):
        g = grid()
        lay = g.layouts["xyz"]
        v = np.array([1, 3, 2])
        point = np.append(v / lay.res[0], 0.5)
        h_s, _ = g.encode(Tensor(point[None]))
        row = lay.corner_indices(v[None, None, None, :].repeat(SMALL.levels, axis=1))[0, 0, 0]
        np.testing.assert_allclose(h_s.data[0, :2], g.tables["xyz"].data[row], atol=1e-14)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_corner_sum_oracle(self, seed):
        g = grid(seed=seed)
        pts = np.random.default_rng(seed + 10).uniform(size=(6, 4))
        h_s, h_t = g.encode(Tensor(pts))
        feats = np.concatenate([h_s.data, h_t.data], axis=1)
        F = SMALL.features
        for i, p in enumerate(pts):
            want = []
            for proj in ("xyz", "xyt", "yzt", "xzt"):
                lay = g.layouts[proj]
                q = p[list(PROJECTIONS[proj])]
                for l in range(SMALL.levels):
                    want.append(oracles.grid_lookup(g.tables[proj].data, lay.res[l], lay.offset[l], lay.dense[l], SMALL.table_size, q))
            np.testing.assert_allclose(feats[i], np.concatenate(want), atol=1e-12)
        assert feats.shape[1] == 4 * SMALL.levels * F

    def test_dense_and_hashed_levels(self):
        """Resolutions 4, 8, 16 have 125, 729, 4913 vertices against a 512-row table."""
        cfg = GridConfig(levels=3, features=1, log2_table_size=9, n_min=4, n_max=16)
        lay = grid(cfg).layouts["xyz"]
        assert lay.dense.tolist() == [True, False, False]
        assert lay.offset.tolist() == [0, 125, 637]
        assert lay.total == 125 + 512 + 512

    def test_time_invariant_spatial_feature(self):
        g = grid()
        p = np.random.default_rng(3).uniform(size=(4, 4))
        q = p.copy()
        q[:, 3] = 1 - q[:, 3]
        a_s, a_t = g.encode(Tensor(p))
        b_s, b_t = g.encode(Tensor(q))
        np.testing.assert_array_equal(a_s.data, b_s.data)
        assert not np.allclose(a_t.data, b_t.data)

    def test_lipschitz_in_cell(self):
        g = grid()
        p = np.array([[0.33, 0.41, 0.52, 0.27]])
        base = np.concatenate([x.data for x in g.encode(Tensor(p))], axis=1)
        ratios = []
        for delta in (1e-3, 1e-4, 1e-5):
            moved = np.concatenate([x.data for x in g.encode(Tensor(p + delta))], axis=1)
            ratios.append(np.abs(moved - base).max() / delta)
        assert max(ratios) < 2 * min(ratios)

    def test_clamps_outside_unit_cube(self):
        g = grid()
        inside = g.encode(Tensor([[0.0, 1.0, 0.5, 1.0]]))
        outside = g.encode(Tensor([[-0.3, 1.7, 0.5, 2.0]]))
        for a, b in zip(inside, outside):
            np.testing.assert_array_equal(a.data, b.data)

    def test_checked_mode_names_axis(self):
        g = grid()
        with checked_mode(), pytest.raises(ValueError, match="coordinate t of query 1"):
            g.encode(Tensor([[0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 1.2]]))

    def test_init_range(self):
        g = HashGridSet(SMALL, np.random.default_rng(0))
        for t in g.tables.values():
            assert np.all(np.abs(t.data) <= 1e-4)


def _weights(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


class TestGradients:
    def test_coordinates(self):
        g = grid()
        rng = np.random.default_rng(4)
        pts = rng.uniform(0.05, 0.95, size=(3, 4))
        w_s, w_t = _weights((3, 4)), _weights((3, 12), 1)
        # keep every coordinate at least 1e-3 cells from a cell boundary at every level
        for proj, lay in g.layouts.items():
            for d, axis in enumerate(PROJECTIONS[proj]):
                for r in lay.res[:, d]:
                    frac = pts[:, axis] * r % 1
                    assert np.all((frac > 1e-3) & (frac < 1 - 1e-3))

        def fn(x):
            h_s, h_t = g.encode(x)
            return T.add(T.sum_(T.mul(h_s, w_s)), T.sum_(T.mul(h_t, w_t)))

        assert finite_diff_check(fn, pts, eps=1e-7) < 1e-4

    @pytest.mark.parametrize("proj", ["xyz", "xyt", "yzt", "xzt"])
    def test_table_entries(self, proj):
        g = grid()
        pts = Tensor(np.random.default_rng(5).uniform(size=(4, 4)))
        w_s, w_t = _weights((4, 4)), _weights((4, 12), 1)
        original = g.tables[proj]

        def fn(table):
            g.tables[proj] = table
            try:
                h_s, h_t = g.encode(pts)
            finally:
                g.tables[proj] = original
            return T.add(T.sum_(T.mul(h_s, w_s)), T.sum_(T.mul(h_t, w_t)))

        assert finite_diff_check(fn, original.data.copy()) < 1e-4

    def test_table_gradient_only_on_touched_rows(self):
        from gsdyn.engine import Tape, backward

        g = grid()
        for t in g.tables.values():
            t.requires_grad = True
        with Tape() as tape:
            h_s, _ = g.encode(Tensor([[0.5, 0.5, 0.5, 0.5]]))
            loss = T.sum_(h_s)
        grads = backward(tape, loss, [g.tables["xyz"], g.tables["xyt"]])
        assert np.count_nonzero(grads[g.tables["xyz"]].any(axis=1)) <= 8 * SMALL.levels
        assert not grads[g.tables["xyt"]].any()
        assert grads[g.tables["xyz"]].sum() == pytest.approx(SMALL.levels * SMALL.features)
