import math

import numpy as np

from mapfusion.autodiff import ModelParams, Tensor, grad_check, l1_masked
from mapfusion.geometry import GridConfig
from mapfusion.pillar_encoder import (
    LIFT_CHANNELS,
    build_pillar_lift,
    pillar_lift,
    pillarize,
)


def groupby_oracle(points, grid):
    """Brute-force per-cell aggregation with a python dict."""
    cells = {}
    for x, y, z, i in points:
        col = math.floor((x - grid.x_range[0]) / grid.cell_w)
        row = math.floor((y - grid.y_range[0]) / grid.cell_h)
        if not (0 <= col < grid.width_px and 0 <= row < grid.height_px):
            continue
        if not (grid.z_range[0] <= z <= grid.z_range[1]):
            continue
        cells.setdefault((row, col), []).append((x, y, z, i))
    out = np.zeros((6, grid.height_px, grid.width_px), np.float64)
    for (row, col), pts in cells.items():
        zs = [p[2] for p in pts]
        out[0, row, col] = 1.0
        out[1, row, col] = math.log1p(len(pts))
        out[2, row, col] = sum(zs) / len(pts)
        out[3, row, col] = max(zs)
        out[4, row, col] = sum(p[3] for p in pts) / len(pts)
        out[5, row, col] = sum(
            math.sqrt(p[0] ** 2 + p[1] ** 2 + p[2] ** 2) for p in pts
        ) / len(pts)
    return out


class TestPillarize:
    def test_empty_cloud(self):
        out = pillarize(np.zeros((0, 4)), GridConfig())
        assert out.shape == (6, 128, 128)
        assert not out.any()

    def test_single_point_closed_form(self):
        grid = GridConfig()
        pt = np.array([[10.3, -4.9, 1.5, 0.5]])
        out = pillarize(pt, grid)
        row, col = math.floor((-4.9 + 32) / 0.5), math.floor((10.3 + 32) / 0.5)
        nonzero = np.argwhere(out.any(axis=0))
        np.testing.assert_array_equal(nonzero, [[row, col]])
        r = math.sqrt(10.3**2 + 4.9**2 + 1.5**2)
        np.testing.assert_allclose(
            out[:, row, col], [1.0, math.log(2.0), 1.5, 1.5, 0.5, r], rtol=1e-6
        )

    def test_matches_groupby_oracle(self, rng):
        grid = GridConfig()
        pts = np.column_stack(
            [
                rng.uniform(-35, 35, 3000),
                rng.uniform(-35, 35, 3000),
                rng.uniform(-4, 4, 3000),
                rng.uniform(0, 1, 3000),
            ]
        )
        np.testing.assert_allclose(pillarize(pts, grid), groupby_oracle(pts, grid), atol=1e-6)

    def test_permutation_invariant_bitwise(self, rng):
        grid = GridConfig()
        pts = np.column_stack(
            [
                rng.uniform(-30, 30, 500),
                rng.uniform(-30, 30, 500),
                rng.uniform(-2, 2, 500),
                rng.uniform(0, 1, 500),
            ]
        )
        a = pillarize(pts, grid)
        b = pillarize(pts[rng.permutation(500)], grid)
        assert (a == b).all()

    def test_out_of_range_point_has_no_effect(self):
        grid = GridConfig()
        inside = np.array([[1.0, 1.0, 0.0, 0.5]])
        outside = np.array(
            [
                [40.0, 0.0, 0.0, 0.5],
                [0.0, -40.0, 0.0, 0.5],
                [2.0, 2.0, 5.0, 0.5],
                [32.0, 0.0, 0.0, 0.5],
            ]
        )
        a = pillarize(inside, grid)
        b = pillarize(np.vstack([inside, outside]), grid)
        assert (a == b).all()


class TestPillarLift:
    def test_zero_input_zero_output(self):
        params = ModelParams()
        build_pillar_lift(params, seed=0)
        raw = np.zeros((6, 16, 16), np.float32)
        out = pillar_lift(raw, params, training=False)
        assert out.shape == (LIFT_CHANNELS, 16, 16)
        assert not out.data.any()

    def test_output_shape_default_grid(self):
        params = ModelParams()
        build_pillar_lift(params, seed=0)
        out = pillar_lift(np.zeros((6, 128, 128), np.float32), params, training=False)
        assert out.shape == (32, 128, 128)

    def test_gradient_vs_finite_differences(self, rng):
        params = ModelParams()
        build_pillar_lift(params, seed=3, dtype=np.float64)
        raw = Tensor(rng.standard_normal((6, 5, 5)), requires_grad=True)
        tgt = rng.standard_normal((32, 5, 5))

        def loss():
            return l1_masked(pillar_lift(raw, params, training=True), tgt, np.ones((5, 5)))

        leaves = [raw] + [p for _, p in params.params()]
        assert grad_check(loss, leaves) < 1e-4
