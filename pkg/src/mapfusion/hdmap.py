"""HD-map layer model, ego-centric raster rendering, and map file I/O.

A map document is a JSON object with the three layer keys
``drivable_area``, ``walkway``, ``carpark_area``; each maps to a list of
polygons ``{"exterior": [[x, y], ...], "holes": [[[x, y], ...], ...]}``
with coordinates in meters in the scene frame.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from mapfusion.geometry import GridConfig, Polygon, Pose2D, rasterize_polygon


class LayerKind(enum.IntEnum):
    """Semantic map layers, in fixed channel order."""

    DRIVABLE_AREA = 0
    WALKWAY = 1
    CARPARK_AREA = 2

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> "LayerKind":
        return cls[key.upper()]


LAYER_KEYS = tuple(kind.key for kind in LayerKind)


class MapFormatError(ValueError):
    """Raised for malformed map documents; the message names the path."""


@dataclass
class HdMap:
    """Polygon lists per semantic layer; every layer key is present."""

    layers: dict[LayerKind, list[Polygon]] = field(
        default_factory=lambda: {kind: [] for kind in LayerKind}
    )

    def __post_init__(self):
        for kind in LayerKind:
            self.layers.setdefault(kind, [])

    def polygons(self, kind: LayerKind) -> list[Polygon]:
        return self.layers[kind]


@dataclass
class RasterStack:
    """Binary (3, H, W) stack in LayerKind channel order."""

    channels: np.ndarray
    grid: GridConfig

    def as_float(self, dtype=np.float32) -> np.ndarray:
        return self.channels.astype(dtype)


def render_ego_raster(hd_map: HdMap, ego: Pose2D, grid: GridConfig) -> RasterStack:
    """Rasterize each layer in the ego frame; polygons within a layer union.

    Layer polygons are mapped through the inverse ego pose, so the ego
    sits at the raster center with its heading along +x.
    """
    inv = ego.inverse()
    channels = np.zeros((len(LayerKind), grid.height_px, grid.width_px), np.uint8)
    for kind in LayerKind:
        for poly in hd_map.polygons(kind):
            channels[kind] |= rasterize_polygon(poly.transform(inv), grid)
    return RasterStack(channels, grid)


def _ring_from_json(obj, path: str) -> np.ndarray:
    if not isinstance(obj, list) or len(obj) < 3:
        raise MapFormatError(f"{path}: ring needs at least 3 vertices")
    for i, vertex in enumerate(obj):
        if (
            not isinstance(vertex, list)
            or len(vertex) != 2
            or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in vertex)
        ):
            raise MapFormatError(f"{path}[{i}]: vertex must be two numbers")
    return np.asarray(obj, dtype=np.float64)


def _polygon_from_json(obj, path: str) -> Polygon:
    if not isinstance(obj, dict) or "exterior" not in obj:
        raise MapFormatError(f"{path}: polygon must be an object with 'exterior'")
    exterior = _ring_from_json(obj["exterior"], f"{path}.exterior")
    holes = []
    for i, hole in enumerate(obj.get("holes", [])):
        holes.append(_ring_from_json(hole, f"{path}.holes[{i}]"))
    return Polygon(exterior, holes)


def map_from_json(doc: dict) -> HdMap:
    if not isinstance(doc, dict):
        raise MapFormatError("map document must be a JSON object")
    layers: dict[LayerKind, list[Polygon]] = {}
    for kind in LayerKind:
        if kind.key not in doc:
            raise MapFormatError(f"missing layer key {kind.key!r}")
        entries = doc[kind.key]
        if not isinstance(entries, list):
            raise MapFormatError(f"{kind.key}: expected a list of polygons")
        layers[kind] = [
            _polygon_from_json(p, f"{kind.key}[{i}]") for i, p in enumerate(entries)
        ]
    return HdMap(layers)


def map_to_json(hd_map: HdMap) -> dict:
    return {
        kind.key: [
            {
                "exterior": poly.exterior.tolist(),
                "holes": [h.tolist() for h in poly.holes],
            }
            for poly in hd_map.polygons(kind)
        ]
        for kind in LayerKind
    }


def load_map(data: bytes) -> HdMap:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MapFormatError(f"map document is not valid JSON: {e}") from e
    return map_from_json(doc)


def save_map(hd_map: HdMap) -> bytes:
    return json.dumps(map_to_json(hd_map), sort_keys=True).encode("utf-8")


def maps_equal(a: HdMap, b: HdMap) -> bool:
    for kind in LayerKind:
        pa, pb = a.polygons(kind), b.polygons(kind)
        if len(pa) != len(pb):
            return False
        for x, y in zip(pa, pb):
            if not np.array_equal(x.exterior, y.exterior):
                return False
            if len(x.holes) != len(y.holes):
                return False
            if any(not np.array_equal(hx, hy) for hx, hy in zip(x.holes, y.holes)):
                return False
    return True
