import math

import numpy as np
import pytest

from mapfusion.geometry import (
    AugmentParams,
    Box3D,
    GridConfig,
    Polygon,
    Pose2D,
    augment_box,
    augment_polygon,
    augment_xy,
    bev_cell_of,
    normalize_angle,
    point_in_box_bev,
    point_in_polygon,
    rasterize_polygon,
    transform_point,
    transform_points,
)


# independent oracle: literal crossing-number test, written against the
# classic formulation rather than the production helper
def crossing_number_inside(px, py, rings):
    parity = False
    for ring in rings:
        n = len(ring)
        for i in range(n):
            x1, y1 = ring[i]
            x2, y2 = ring[(i + 1) % n]
            if (y1 <= py < y2) or (y2 <= py < y1):
                xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
                if px < xint:
                    parity = not parity
    return parity


def random_convex_polygon(rng, n_min=3, n_max=10, radius=25.0):
    n = int(rng.integers(n_min, n_max + 1))
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
    radii = rng.uniform(0.2 * radius, radius, size=n)
    cx, cy = rng.uniform(-10, 10, size=2)
    pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
    return Polygon(pts)


class TestPose:
    def test_transform_identity(self):
        assert transform_point((1.0, 0.0), Pose2D()) == (1.0, 0.0)

    def test_quarter_turn(self):
        x, y = transform_point((1.0, 0.0), Pose2D(0.0, 0.0, math.pi / 2))
        assert abs(x - 0.0) < 1e-12 and abs(y - 1.0) < 1e-12

    def test_matches_matrix_oracle(self, rng):
        for _ in range(200):
            p = rng.uniform(-50, 50, size=2)
            pose = Pose2D(*rng.uniform(-20, 20, size=2), rng.uniform(-math.pi, math.pi))
            rot = np.array(
                [
                    [math.cos(pose.yaw), -math.sin(pose.yaw)],
                    [math.sin(pose.yaw), math.cos(pose.yaw)],
                ]
            )
            expected = rot @ p + np.array([pose.x, pose.y])
            got = transform_point(p, pose)
            np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_inverse_compose_is_identity(self, rng):
        for _ in range(100):
            pose = Pose2D(*rng.uniform(-20, 20, size=2), rng.uniform(-math.pi, math.pi))
            ident = pose.compose(pose.inverse())
            assert abs(ident.x) < 1e-9 and abs(ident.y) < 1e-9
            assert abs(normalize_angle(ident.yaw)) < 1e-9

    def test_yaw_normalized(self):
        assert Pose2D(0, 0, 3 * math.pi).yaw == pytest.approx(math.pi)
        assert normalize_angle(-math.pi) == pytest.approx(math.pi)
        assert normalize_angle(0.3) == 0.3


class TestGrid:
    def test_cell_of_corner(self):
        grid = GridConfig()
        assert bev_cell_of((-32.0, -32.0), grid) == (0, 0)

    def test_max_is_exclusive(self):
        grid = GridConfig()
        assert bev_cell_of((32.0, 0.0), grid) is None
        assert bev_cell_of((0.0, 32.0), grid) is None

    def test_matches_formula_oracle(self, rng):
        grid = GridConfig()
        for _ in range(500):
            x, y = rng.uniform(-40, 40, size=2)
            col = math.floor((x + 32.0) / 0.5)
            row = math.floor((y + 32.0) / 0.5)
            expected = (row, col) if 0 <= row < 128 and 0 <= col < 128 else None
            assert bev_cell_of((x, y), grid) == expected

    def test_validation(self):
        with pytest.raises(ValueError):
            GridConfig(width_px=0)
        with pytest.raises(ValueError):
            GridConfig(x_range=(1.0, 1.0))


class TestRasterize:
    def test_full_cover_rectangle(self):
        grid = GridConfig()
        poly = Polygon([[-40, -40], [40, -40], [40, 40], [-40, 40]])
        assert rasterize_polygon(poly, grid).all()

    def test_disjoint_polygon(self):
        grid = GridConfig()
        poly = Polygon([[100, 100], [110, 100], [105, 110]])
        assert not rasterize_polygon(poly, grid).any()

    def test_degenerate_warns_and_empty(self):
        grid = GridConfig()
        with pytest.warns(UserWarning, match="degenerate"):
            mask = rasterize_polygon(Polygon(np.zeros((2, 2))), grid)
        assert not mask.any()

    def test_matches_crossing_number_oracle(self, rng):
        grid = GridConfig()
        cx, cy = grid.centers_x(), grid.centers_y()
        for _ in range(50):
            poly = random_convex_polygon(rng)
            mask = rasterize_polygon(poly, grid)
            rings = [poly.exterior]
            for r in range(128):
                for c in range(128):
                    assert bool(mask[r, c]) == crossing_number_inside(cx[c], cy[r], rings)

    def test_hole_subtracts(self):
        grid = GridConfig()
        outer = [[-20, -20], [20, -20], [20, 20], [-20, 20]]
        hole = [[-5, -5], [5, -5], [5, 5], [-5, 5]]
        mask = rasterize_polygon(Polygon(outer, [np.array(hole)]), grid)
        inside_hole = bev_cell_of((0.25, 0.25), grid)
        in_rim = bev_cell_of((10.25, 10.25), grid)
        assert mask[inside_hole] == 0
        assert mask[in_rim] == 1

    def test_consistent_with_point_in_polygon_at_centers(self, rng):
        grid = GridConfig()
        poly = random_convex_polygon(rng)
        mask = rasterize_polygon(poly, grid)
        cx, cy = grid.centers_x(), grid.centers_y()
        for _ in range(200):
            r, c = rng.integers(0, 128, size=2)
            assert bool(mask[r, c]) == point_in_polygon((cx[c], cy[r]), poly)


def random_params(rng):
    return AugmentParams(
        rotation=rng.uniform(-math.pi / 4, math.pi / 4),
        flip_x=bool(rng.integers(2)),
        flip_y=bool(rng.integers(2)),
        scale=rng.uniform(0.95, 1.05),
    )


class TestAugment:
    def test_identity_bitwise(self, rng):
        pts = rng.uniform(-30, 30, size=(40, 2))
        out = augment_xy(pts, AugmentParams())
        assert (out == pts).all()

    def test_flip_involution(self, rng):
        pts = rng.uniform(-30, 30, size=(40, 2))
        p = AugmentParams(flip_x=True)
        out = augment_xy(augment_xy(pts, p), p)
        np.testing.assert_allclose(out, pts, atol=1e-12)

    def test_inverse_composition(self, rng):
        for _ in range(200):
            params = random_params(rng)
            pts = rng.uniform(-30, 30, size=(10, 2))
            back = augment_xy(augment_xy(pts, params), params.inverse())
            np.testing.assert_allclose(back, pts, atol=1e-9)

    def test_inverse_composition_boxes(self, rng):
        for _ in range(100):
            params = random_params(rng)
            box = Box3D(
                center=tuple(rng.uniform(-20, 20, size=3)),
                size=(4.5, 2.0, 1.6),
                yaw=rng.uniform(-math.pi, math.pi),
                class_id=0,
            )
            back = augment_box(augment_box(box, params), params.inverse())
            np.testing.assert_allclose(back.center, box.center, atol=1e-9)
            np.testing.assert_allclose(back.size, box.size, atol=1e-9)
            assert abs(normalize_angle(back.yaw - box.yaw)) < 1e-9

    def test_preserves_polygon_containment(self, rng):
        for _ in range(1000):
            poly = random_convex_polygon(rng, radius=15.0)
            p = rng.uniform(-25, 25, size=2)
            params = random_params(rng)
            before = point_in_polygon(p, poly)
            after = point_in_polygon(
                augment_xy(p[None, :], params)[0], augment_polygon(poly, params)
            )
            assert before == after

    def test_preserves_box_containment(self, rng):
        for _ in range(1000):
            box = Box3D(
                center=tuple(rng.uniform(-15, 15, size=3)),
                size=tuple(rng.uniform(0.5, 6.0, size=3)),
                yaw=rng.uniform(-math.pi, math.pi),
                class_id=0,
            )
            p = rng.uniform(-20, 20, size=2)
            params = random_params(rng)
            before = point_in_box_bev(p, box)
            after = point_in_box_bev(
                augment_xy(p[None, :], params)[0], augment_box(box, params)
            )
            assert before == after

    def test_scale_validation(self):
        with pytest.raises(ValueError):
            AugmentParams(scale=0.0)
        with pytest.raises(ValueError):
            AugmentParams(scale=-1.0)


class TestBox:
    def test_size_validation(self):
        with pytest.raises(ValueError):
            Box3D(center=(0, 0, 0), size=(0.0, 1.0, 1.0), yaw=0.0, class_id=0)

    def test_bev_corners_via_transform_oracle(self, rng):
        box = Box3D(center=(3.0, -2.0, 0.0), size=(4.0, 2.0, 1.5), yaw=0.7, class_id=1)
        pose = Pose2D(3.0, -2.0, 0.7)
        expected = transform_points(
            np.array([[2.0, 1.0], [-2.0, 1.0], [-2.0, -1.0], [2.0, -1.0]]), pose
        )
        np.testing.assert_allclose(box.bev_corners(), expected, atol=1e-12)
