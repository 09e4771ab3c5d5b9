import json
import math

import numpy as np
import pytest

from mapfusion.geometry import GridConfig, Polygon, Pose2D, rasterize_polygon
from mapfusion.hdmap import (
    HdMap,
    LayerKind,
    MapFormatError,
    load_map,
    maps_equal,
    render_ego_raster,
    save_map,
)


def square(cx, cy, half):
    return Polygon(
        [
            [cx - half, cy - half],
            [cx + half, cy - half],
            [cx + half, cy + half],
            [cx - half, cy + half],
        ]
    )


def random_map(rng, n_per_layer=2):
    layers = {}
    for kind in LayerKind:
        layers[kind] = [
            square(*rng.uniform(-20, 20, size=2), rng.uniform(2, 10))
            for _ in range(n_per_layer)
        ]
    return HdMap(layers)


class TestLayerKind:
    def test_channel_order_fixed(self):
        assert LayerKind.DRIVABLE_AREA == 0
        assert LayerKind.WALKWAY == 1
        assert LayerKind.CARPARK_AREA == 2
        assert [k.key for k in LayerKind] == ["drivable_area", "walkway", "carpark_area"]


class TestRender:
    def test_empty_map_all_zeros(self):
        out = render_ego_raster(HdMap(), Pose2D(), GridConfig())
        assert out.channels.shape == (3, 128, 128)
        assert not out.channels.any()

    def test_full_cover_single_channel(self):
        m = HdMap({LayerKind.DRIVABLE_AREA: [square(0, 0, 50)]})
        out = render_ego_raster(m, Pose2D(), GridConfig())
        assert out.channels[0].all()
        assert not out.channels[1].any() and not out.channels[2].any()

    def test_equals_pretransformed_rasterization(self, rng):
        grid = GridConfig()
        ego = Pose2D(3.5, -2.0, math.pi / 2)
        m = random_map(rng)
        out = render_ego_raster(m, ego, grid)
        inv = ego.inverse()
        for kind in LayerKind:
            expected = np.zeros((128, 128), np.uint8)
            for poly in m.polygons(kind):
                expected |= rasterize_polygon(poly.transform(inv), grid)
            np.testing.assert_array_equal(out.channels[kind], expected)

    def test_overlap_unions_within_layer(self):
        m = HdMap({LayerKind.WALKWAY: [square(0, 0, 10), square(5, 0, 10)]})
        out = render_ego_raster(m, Pose2D(), GridConfig())
        a = rasterize_polygon(square(0, 0, 10), GridConfig())
        b = rasterize_polygon(square(5, 0, 10), GridConfig())
        np.testing.assert_array_equal(out.channels[1], a | b)

    def test_equivariance_under_rigid_motion(self, rng):
        # render(map, ego o g) == render(g^-1 . map, ego), pixel for pixel
        grid = GridConfig()
        m = random_map(rng)
        ego = Pose2D(1.0, 2.0, 0.4)
        g = Pose2D(-3.0, 5.0, -1.1)
        lhs = render_ego_raster(m, g.compose(ego), grid)
        ginv = g.inverse()
        moved = HdMap(
            {
                kind: [p.transform(ginv) for p in m.polygons(kind)]
                for kind in LayerKind
            }
        )
        rhs = render_ego_raster(moved, ego, grid)
        np.testing.assert_array_equal(lhs.channels, rhs.channels)


class TestMapIO:
    def test_round_trip(self, rng):
        m = random_map(rng)
        again = load_map(save_map(m))
        assert maps_equal(m, again)

    def test_missing_layer_key_rejected(self):
        doc = json.loads(save_map(HdMap()).decode())
        del doc["walkway"]
        with pytest.raises(MapFormatError, match="walkway"):
            load_map(json.dumps(doc).encode())

    def test_short_ring_names_path(self):
        doc = json.loads(save_map(HdMap()).decode())
        doc["carpark_area"] = [{"exterior": [[0, 0], [1, 0]], "holes": []}]
        with pytest.raises(MapFormatError, match=r"carpark_area\[0\].exterior"):
            load_map(json.dumps(doc).encode())

    def test_non_numeric_coordinate_names_path(self):
        doc = json.loads(save_map(HdMap()).decode())
        doc["drivable_area"] = [
            {"exterior": [[0, 0], [1, 0], [1, "x"]], "holes": []}
        ]
        with pytest.raises(MapFormatError, match=r"drivable_area\[0\].exterior\[2\]"):
            load_map(json.dumps(doc).encode())

    def test_hand_written_document(self):
        doc = {
            "drivable_area": [{"exterior": [[0, 0], [10, 0], [5, 8]], "holes": []}],
            "walkway": [{"exterior": [[-5, -5], [-1, -5], [-3, -1]], "holes": []}],
            "carpark_area": [{"exterior": [[20, 20], [24, 20], [22, 25]], "holes": []}],
        }
        m = load_map(json.dumps(doc).encode())
        for kind in LayerKind:
            assert len(m.polygons(kind)) == 1
        np.testing.assert_array_equal(
            m.polygons(LayerKind.DRIVABLE_AREA)[0].exterior,
            np.array([[0, 0], [10, 0], [5, 8]], dtype=np.float64),
        )

    def test_channel_order_stable_through_io(self, rng):
        m = random_map(rng, n_per_layer=1)
        again = load_map(save_map(m))
        out1 = render_ego_raster(m, Pose2D(), GridConfig())
        out2 = render_ego_raster(again, Pose2D(), GridConfig())
        np.testing.assert_array_equal(out1.channels, out2.channels)
