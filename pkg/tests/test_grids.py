import itertools

import numpy as np
import pytest

from partrf import engine, grids
from partrf.engine import Value
from partrf.grids import FeatureGrid3D, MultiDistanceConfig

from conftest import assert_close, grad_check


AABB = np.array([[-1.0, -2.0, 0.0], [1.0, 2.0, 3.0]])


def brute_force_trilinear(grid: FeatureGrid3D, x: np.ndarray) -> np.ndarray:
    """Independent 8-term weighted sum, index arithmetic done longhand."""
    res = np.array(grid.res)
    u = (x - grid.aabb[0]) / (grid.aabb[1] - grid.aabb[0]) * (res - 1)
    u = np.clip(u, 0, res - 1)
    i0 = np.minimum(np.floor(u).astype(int), res - 2)
    f = u - i0
    out = np.zeros(grid.channels)
    for corner in itertools.product((0, 1), repeat=3):
        w = 1.0
        for a in range(3):
            w *= f[a] if corner[a] else (1.0 - f[a])
        out += w * grid.values.data[i0[0] + corner[0], i0[1] + corner[1], i0[2] + corner[2]]
    return out


def random_grid(rng, res=(5, 6, 4), channels=3, aabb=AABB):
    g = FeatureGrid3D(res, channels, aabb)
    g.values.data = rng.normal(size=g.values.shape)
    return g


def safe_points(rng, grid, n, margin=1e-3):
    """Interior points away from every lattice plane of every stride."""
    res = np.array(grid.res)
    pts = []
    while len(pts) < n:
        u = rng.uniform(margin, res - 1 - margin, size=3)
        if np.all(np.abs(u - np.round(u)) > margin) and np.all(np.abs(u / 2 - np.round(u / 2)) > margin):
            pts.append(grid.aabb[0] + u / (res - 1) * (grid.aabb[1] - grid.aabb[0]))
    return np.array(pts)


class TestTrilinear:
    def test_lattice_node_returns_node_feature(self, rng):
        g = random_grid(rng)
        xs, ys, zs = g.node_positions()
        x = np.array([[xs[2], ys[4], zs[1]]])
        out = grids.trilinear(g, x).data[0]
        assert_close(out, g.values.data[2, 4, 1], rtol=1e-12, atol=1e-12)

    def test_cell_center_averages_corners(self):
        g = FeatureGrid3D((2, 2, 2), 1, [[0, 0, 0], [1, 1, 1]])
        g.values.data = np.arange(8.0).reshape(2, 2, 2, 1)
        out = grids.trilinear(g, np.array([[0.5, 0.5, 0.5]])).data
        assert_close(out, [[3.5]], rtol=1e-12, atol=1e-12)

    def test_matches_brute_force_weight_oracle(self, rng):
        g = random_grid(rng)
        for _ in range(50):
            x = rng.uniform(AABB[0], AABB[1])
            got = grids.trilinear(g, x[None]).data[0]
            assert_close(got, brute_force_trilinear(g, x), rtol=1e-10, atol=1e-12)

    def test_out_of_bounds_clamps(self, rng):
        g = random_grid(rng)
        far_out = np.array([[10.0, -99.0, 100.0]])
        corner = np.array([[AABB[1][0], AABB[0][1], AABB[1][2]]])
        assert_close(grids.trilinear(g, far_out).data,
                     grids.trilinear(g, corner).data, rtol=1e-12, atol=1e-12)

    def test_linear_along_axis_inside_cell(self, rng):
        g = random_grid(rng)
        base = safe_points(rng, g, 1)[0]
        cell = (AABB[1] - AABB[0]) / (np.array(g.res) - 1)
        eps = 0.2 * cell[0]
        u = np.floor((base - AABB[0]) / cell)
        lo = AABB[0] + u * cell + 0.1 * cell  # strictly inside one cell
        a = grids.trilinear(g, lo[None]).data[0]
        b = grids.trilinear(g, (lo + [eps, 0, 0])[None]).data[0]
        c = grids.trilinear(g, (lo + [2 * eps, 0, 0])[None]).data[0]
        assert_close(c - b, b - a, rtol=1e-6, atol=1e-9)

    def test_gradient_wrt_grid_and_position(self, rng):
        g = random_grid(rng, res=(3, 4, 3), channels=2)
        pts = safe_points(rng, g, 4)

        def f(v):
            gg = FeatureGrid3D(g.res, g.channels, g.aabb)
            gg.values = v["vals"]
            out = grids.trilinear(gg, v["pos"])
            return engine.vsum(out * out)

        grad_check(f, {"vals": g.values.data, "pos": pts})


class TestMultiDistance:
    def test_single_stride_equals_trilinear(self, rng):
        g = random_grid(rng)
        pts = rng.uniform(AABB[0], AABB[1], size=(6, 3))
        a = grids.multi_distance_interp(g, pts, MultiDistanceConfig((1,))).data
        b = grids.trilinear(g, pts).data
        assert_close(a, b, rtol=0, atol=0)

    def test_constant_grid_repeats_constant(self, rng):
        g = FeatureGrid3D((5, 5, 5), 2, AABB)
        g.values.data = np.broadcast_to([1.5, -0.5], g.values.shape).copy()
        out = grids.multi_distance_interp(g, np.zeros((3, 3)), MultiDistanceConfig((1, 2))).data
        assert_close(out, np.tile([1.5, -0.5], (3, 2)), rtol=1e-12, atol=1e-12)

    def test_matches_materialized_subgrid_oracle(self, rng):
        g = random_grid(rng, res=(7, 7, 7), channels=2)
        # explicit half-resolution grid over the hull of the strided nodes
        sub_vals = g.values.data[::2, ::2, ::2]
        sub_res = np.array(sub_vals.shape[:3])
        cell = (g.aabb[1] - g.aabb[0]) / (np.array(g.res) - 1)
        sub_aabb = np.stack([g.aabb[0], g.aabb[0] + (sub_res - 1) * 2 * cell])
        sub = FeatureGrid3D(sub_res, 2, sub_aabb, values=sub_vals.copy())

        pts = rng.uniform(sub_aabb[0], sub_aabb[1], size=(20, 3))
        got = grids.multi_distance_interp(g, pts, MultiDistanceConfig((1, 2))).data
        want = np.concatenate([grids.trilinear(g, pts).data,
                               grids.trilinear(sub, pts).data], axis=1)
        assert_close(got, want, rtol=1e-10, atol=1e-12)

    def test_coarse_stride_rejected(self, rng):
        g = random_grid(rng, res=(4, 4, 4))
        with pytest.raises(ValueError):
            grids.multi_distance_interp(g, np.zeros((1, 3)), MultiDistanceConfig((1, 4)))

    def test_strides_must_start_at_one(self):
        with pytest.raises(ValueError):
            MultiDistanceConfig((2, 4))

    def test_gradient(self, rng):
        g = random_grid(rng, res=(5, 5, 5), channels=2)
        pts = safe_points(rng, g, 3)

        def f(v):
            gg = FeatureGrid3D(g.res, g.channels, g.aabb)
            gg.values = v["vals"]
            out = grids.multi_distance_interp(gg, v["pos"], MultiDistanceConfig((1, 2)))
            return engine.vsum(out * out)

        grad_check(f, {"vals": g.values.data, "pos": pts})


class TestPositionalEncoding:
    def test_zero_input(self):
        out = grids.positional_encoding(np.zeros((1, 2)), 3)
        assert_close(out[0, :2], 0.0, rtol=0, atol=0)           # identity
        sin_cols = out[0, 2::2][: 2 * 3]
        # layout: [v, sin(f0 v), cos(f0 v), sin(f1 v), ...] per full vector
        assert out.shape == (1, 2 * (1 + 6))
        expected = np.concatenate([np.zeros(2)] + [np.concatenate([np.zeros(2), np.ones(2)])] * 3)
        assert_close(out[0], expected, rtol=0, atol=0)
        del sin_cols

    def test_half_at_first_frequency(self):
        out = grids.positional_encoding(np.array([[0.5]]), 1)
        assert_close(out, [[0.5, 1.0, 0.0]], rtol=1e-12, atol=1e-12)

    def test_nfreq_zero_passthrough(self, rng):
        v = rng.normal(size=(4, 3))
        out = grids.positional_encoding(v, 0)
        assert out is v

    def test_value_variant_matches_and_differentiates(self, rng):
        v0 = rng.normal(size=(3, 2))
        got = grids.positional_encoding(Value(v0), 2).data
        want = grids.positional_encoding(v0, 2)
        assert_close(got, want, rtol=1e-12, atol=1e-12)

        def f(v):
            return engine.vsum(grids.positional_encoding(v["x"], 2) ** 2.0)

        grad_check(f, {"x": v0})

    def test_negative_nfreq_rejected(self):
        with pytest.raises(ValueError):
            grids.positional_encoding(np.zeros(3), -1)


def brute_force_tv(vals: np.ndarray) -> float:
    nx, ny, nz, c = vals.shape
    total, count = 0.0, 0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                for ch in range(c):
                    if i + 1 < nx:
                        total += (vals[i + 1, j, k, ch] - vals[i, j, k, ch]) ** 2
                        count += 1
                    if j + 1 < ny:
                        total += (vals[i, j + 1, k, ch] - vals[i, j, k, ch]) ** 2
                        count += 1
                    if k + 1 < nz:
                        total += (vals[i, j, k + 1, ch] - vals[i, j, k, ch]) ** 2
                        count += 1
    return total / count


class TestTvLoss:
    def test_constant_grid_zero(self):
        g = FeatureGrid3D((4, 4, 4), 2, AABB)
        g.values.data[:] = 3.0
        assert float(grids.tv_loss(g).data) == 0.0

    def test_two_node_line(self):
        g = FeatureGrid3D((2, 2, 2), 1, AABB)
        # only x-axis varies: {0,1} along x; y/z constant copies
        g.values.data[0, :, :, 0] = 0.0
        g.values.data[1, :, :, 0] = 1.0
        # 4 x-diffs of 1, 4+4 zero diffs along y,z -> mean = 4/12
        assert_close(float(grids.tv_loss(g).data), 4.0 / 12.0, rtol=1e-12, atol=1e-12)

    def test_single_difference_is_one(self):
        vals = np.zeros((2, 1, 1, 1))
        vals[1, 0, 0, 0] = 1.0
        g = FeatureGrid3D.__new__(FeatureGrid3D)
        g.res = (2, 1, 1)
        g.channels = 1
        g.aabb = AABB
        g.values = Value(vals, requires_grad=True)
        assert float(grids.tv_loss(g).data) == 1.0

    def test_matches_brute_force(self, rng):
        g = random_grid(rng, res=(3, 4, 5), channels=2)
        got = float(grids.tv_loss(g).data)
        assert_close(got, brute_force_tv(g.values.data), rtol=1e-10, atol=1e-12)

    def test_gradient(self, rng):
        vals = rng.normal(size=(3, 3, 3, 2))

        def f(v):
            g = FeatureGrid3D((3, 3, 3), 2, AABB)
            g.values = v["vals"]
            return grids.tv_loss(g)

        grad_check(f, {"vals": vals})


class TestUpsample:
    def test_constant_stays_constant(self):
        g = FeatureGrid3D((3, 3, 3), 2, AABB)
        g.values.data[:] = 0.7
        up = grids.upsample_grid(g, (7, 5, 9))
        assert up.res == (7, 5, 9)
        assert_close(up.values.data, 0.7, rtol=0, atol=1e-12)
        assert_close(up.aabb, g.aabb, rtol=0, atol=0)

    def test_same_resolution_preserves_exactly(self, rng):
        g = random_grid(rng, res=(4, 5, 6))
        up = grids.upsample_grid(g, (4, 5, 6))
        assert_close(up.values.data, g.values.data, rtol=0, atol=0)

    def test_linear_ramp_doubling_keeps_node_values(self, rng):
        g = FeatureGrid3D((5, 5, 5), 1, AABB)
        xs, ys, zs = g.node_positions()
        ramp = (xs[:, None, None] + 2.0 * ys[None, :, None] - zs[None, None, :])
        g.values.data = ramp[..., None]
        up = grids.upsample_grid(g, (9, 9, 9))
        # original nodes land on every second new node
        assert_close(up.values.data[::2, ::2, ::2], g.values.data, rtol=1e-6, atol=1e-6)

    def test_shrink_rejected(self, rng):
        g = random_grid(rng)
        with pytest.raises(ValueError):
            grids.upsample_grid(g, (2, 2, 2))

    def test_constant_grid_tv_stays_zero_after_upsample(self):
        g = FeatureGrid3D((3, 3, 3), 1, AABB)
        g.values.data[:] = 1.25
        up = grids.upsample_grid(g, (6, 6, 6))
        assert float(grids.tv_loss(up).data) <= 0.0 + 1e-15
