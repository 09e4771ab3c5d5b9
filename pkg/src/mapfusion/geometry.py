"""Planar rigid transforms, polygons, BEV grid quantization, rasterization,
and the synchronized augmentation applied to points, boxes, and map layers.

Conventions: x/y in meters, yaw in radians counterclockwise about the
gravity axis, normalized to (-pi, pi].  Grid row 0 / column 0 cover the
minimum-y / minimum-x corner; a cell's sample point is its metric center.
``flip_x`` negates the x coordinate (mirror across the y axis) and
``flip_y`` negates y.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from mapfusion.kernels.raster import fill_even_odd

if TYPE_CHECKING:  # pragma: no cover
    from mapfusion.scene_gen import Sample

TWO_PI = 2.0 * math.pi


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]; values already in range pass unchanged."""
    a = a - TWO_PI * round(a / TWO_PI)
    if a > math.pi:
        a -= TWO_PI
    if a <= -math.pi:
        a += TWO_PI
    return a


@dataclass(frozen=True)
class Pose2D:
    """Planar rigid transform: rotation by ``yaw`` then translation."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.yaw)

    def compose(self, other: "Pose2D") -> "Pose2D":
        """Pose applying ``other`` first, then ``self``."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )


def transform_points(points: np.ndarray, pose: Pose2D) -> np.ndarray:
    """Rotate then translate an (N, 2) array of planar points."""
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    out = np.empty_like(points, dtype=np.float64)
    out[:, 0] = c * points[:, 0] - s * points[:, 1] + pose.x
    out[:, 1] = s * points[:, 0] + c * points[:, 1] + pose.y
    return out


def transform_point(p: Sequence[float], pose: Pose2D) -> tuple[float, float]:
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    return (c * p[0] - s * p[1] + pose.x, s * p[0] + c * p[1] + pose.y)


@dataclass
class Polygon:
    """Simple polygon with optional holes; rings are (N, 2) float arrays."""

    exterior: np.ndarray
    holes: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.exterior = np.asarray(self.exterior, dtype=np.float64)
        self.holes = [np.asarray(h, dtype=np.float64) for h in self.holes]

    def rings(self) -> list[np.ndarray]:
        return [self.exterior, *self.holes]

    def transform(self, pose: Pose2D) -> "Polygon":
        return Polygon(
            transform_points(self.exterior, pose),
            [transform_points(h, pose) for h in self.holes],
        )


def polygon_area(ring: np.ndarray) -> float:
    """Unsigned shoelace area of a single ring."""
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def point_in_ring(p: Sequence[float], ring: np.ndarray) -> bool:
    """Crossing-number test; same edge rule as the rasterizer."""
    px, py = float(p[0]), float(p[1])
    inside = False
    n = ring.shape[0]
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % n]
        if (y1 <= py < y2) or (y2 <= py < y1):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < xint:
                inside = not inside
    return inside


def point_in_polygon(p: Sequence[float], poly: Polygon) -> bool:
    """Even-odd membership: holes subtract."""
    parity = False
    for ring in poly.rings():
        if point_in_ring(p, ring):
            parity = not parity
    return parity


@dataclass(frozen=True)
class GridConfig:
    """Shared BEV discretization for the pillar grid and the map raster."""

    width_px: int = 128
    height_px: int = 128
    x_range: tuple[float, float] = (-32.0, 32.0)
    y_range: tuple[float, float] = (-32.0, 32.0)
    z_range: tuple[float, float] = (-3.0, 3.0)

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("grid dimensions must be positive")
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if not hi > lo:
                raise ValueError("grid ranges must be non-degenerate")

    @property
    def cell_w(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.width_px

    @property
    def cell_h(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / self.height_px

    def centers_x(self) -> np.ndarray:
        return self.x_range[0] + (np.arange(self.width_px) + 0.5) * self.cell_w

    def centers_y(self) -> np.ndarray:
        return self.y_range[0] + (np.arange(self.height_px) + 0.5) * self.cell_h

    def to_json(self) -> dict:
        return {
            "width_px": self.width_px,
            "height_px": self.height_px,
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "z_range": list(self.z_range),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GridConfig":
        return cls(
            width_px=int(d["width_px"]),
            height_px=int(d["height_px"]),
            x_range=tuple(d["x_range"]),
            y_range=tuple(d["y_range"]),
            z_range=tuple(d["z_range"]),
        )


def bev_cell_of(p: Sequence[float], grid: GridConfig) -> tuple[int, int] | None:
    """Floor-quantize (x, y) into (row, col); None when out of range."""
    col = math.floor((p[0] - grid.x_range[0]) / grid.cell_w)
    row = math.floor((p[1] - grid.y_range[0]) / grid.cell_h)
    if 0 <= row < grid.height_px and 0 <= col < grid.width_px:
        return row, col
    return None


def rasterize_polygon(poly: Polygon, grid: GridConfig) -> np.ndarray:
    """Binary (height_px, width_px) mask of pixel centers inside ``poly``.

    Even-odd rule; holes subtract.  Degenerate rings (< 3 vertices) are
    skipped with a warning, so a degenerate exterior yields an empty mask.
    """
    mask = np.zeros((grid.height_px, grid.width_px), dtype=np.uint8)
    rings = []
    for ring in poly.rings():
        if ring.shape[0] < 3:
            warnings.warn(
                f"degenerate polygon ring with {ring.shape[0]} vertices skipped",
                stacklevel=2,
            )
            if ring is poly.exterior:
                return mask
            continue
        rings.append(ring)
    fill_even_odd(rings, grid.centers_x(), grid.centers_y(), mask)
    return mask


@dataclass(frozen=True)
class AugmentParams:
    """Similarity transform applied in the fixed order scale, flip, rotate.

    The training sampler draws rotation from [-pi/4, pi/4] and scale from
    [0.95, 1.05]; the type itself only rejects non-positive or non-finite
    scale so that inverse parameters (scale 1/s) remain representable.
    """

    rotation: float = 0.0
    flip_x: bool = False
    flip_y: bool = False
    scale: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0.0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not math.isfinite(self.rotation):
            raise ValueError("rotation must be finite")

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation == 0.0
            and not self.flip_x
            and not self.flip_y
            and self.scale == 1.0
        )

    def inverse(self) -> "AugmentParams":
        # With exactly one flip F, F R(t) = R(-t) F, so undoing requires
        # rotation +t; with zero or two flips the frame stays right-handed
        # and the usual -t applies.
        odd = self.flip_x != self.flip_y
        return AugmentParams(
            rotation=self.rotation if odd else -self.rotation,
            flip_x=self.flip_x,
            flip_y=self.flip_y,
            scale=1.0 / self.scale,
        )


def augment_xy(points: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply scale, flips, rotation to an (N, 2) array."""
    out = np.array(points, dtype=np.float64, copy=True)
    out *= params.scale
    if params.flip_x:
        out[:, 0] = -out[:, 0]
    if params.flip_y:
        out[:, 1] = -out[:, 1]
    c, s = math.cos(params.rotation), math.sin(params.rotation)
    x = c * out[:, 0] - s * out[:, 1]
    y = s * out[:, 0] + c * out[:, 1]
    out[:, 0] = x
    out[:, 1] = y
    return out


def augment_yaw(yaw: float, params: AugmentParams) -> float:
    if params.flip_x:
        yaw = math.pi - yaw
    if params.flip_y:
        yaw = -yaw
    return normalize_angle(yaw + params.rotation)


@dataclass
class Box3D:
    """Upright cuboid: center, size (length, width, height), yaw, class."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    class_id: int

    def __post_init__(self):
        if any(not s > 0 for s in self.size):
            raise ValueError(f"box size components must be positive: {self.size}")
        self.yaw = normalize_angle(self.yaw)

    def bev_corners(self) -> np.ndarray:
        """(4, 2) BEV footprint corners, counterclockwise."""
        l2, w2 = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[l2, w2], [-l2, w2], [-l2, -w2], [l2, -w2]])
        return transform_points(local, Pose2D(self.center[0], self.center[1], self.yaw))


def point_in_box_bev(p: Sequence[float], box: Box3D) -> bool:
    """BEV footprint membership (closed box)."""
    dx = p[0] - box.center[0]
    dy = p[1] - box.center[1]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return abs(u) <= box.size[0] / 2.0 and abs(v) <= box.size[1] / 2.0


def augment_box(box: Box3D, params: AugmentParams) -> Box3D:
    cx, cy = augment_xy(np.array([[box.center[0], box.center[1]]]), params)[0]
    return Box3D(
        center=(float(cx), float(cy), box.center[2] * params.scale),
        size=tuple(s * params.scale for s in box.size),
        yaw=augment_yaw(box.yaw, params),
        class_id=box.class_id,
    )


def augment_polygon(poly: Polygon, params: AugmentParams) -> Polygon:
    return Polygon(
        augment_xy(poly.exterior, params),
        [augment_xy(h, params) for h in poly.holes],
    )


def apply_augment(sample: "Sample", params: AugmentParams) -> "Sample":
    """Apply one similarity transform to points, boxes, and map polygons.

    The same parameters hit every constituent so that containment
    relations (point-in-polygon, point-in-box) are preserved.
    """
    points = np.array(sample.points, copy=True)
    if points.shape[0]:
        points[:, :2] = augment_xy(points[:, :2], params)
        points[:, 2] *= params.scale
    boxes = [augment_box(b, params) for b in sample.boxes]
    layers = {
        kind: [augment_polygon(p, params) for p in polys]
        for kind, polys in sample.map.layers.items()
    }
    new_map = dataclasses.replace(sample.map, layers=layers)
    return dataclasses.replace(sample, points=points, boxes=boxes, map=new_map)


def iter_polygons(layers: dict) -> Iterable[Polygon]:
    for polys in layers.values():
        yield from polys
