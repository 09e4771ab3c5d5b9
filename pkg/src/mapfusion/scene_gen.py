"""Deterministic synthetic scene and dataset generator.

Each scene lays a road corridor (drivable area) with flanking walkways and
one carpark through a 64 m x 64 m window, places cars on the road,
pedestrians on walkways, and barriers along the road edges, then injects
off-road clutter blobs whose box dimensions, point counts, and intensity
signatures are drawn from the car/pedestrian distributions.  Clutter gets
no ground-truth box: telling it from a real object requires knowing where
the road is, which is exactly the signal map fusion adds.

Randomness comes from a Philox4x64-10 counter RNG keyed by
(dataset seed, sample index), so scenes are reproducible from the key
alone; the on-disk dataset remains the canonical interchange format.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mapfusion.geometry import (
    Box3D,
    GridConfig,
    Polygon,
    point_in_polygon,
)
from mapfusion.hdmap import HdMap, LayerKind, load_map, save_map

CLASSES = ("car", "pedestrian", "barrier")
CLASS_TO_ID = {name: i for i, name in enumerate(CLASSES)}

# per-class (length, width, height) uniform ranges and intensity ranges
_DIMS = {
    "car": ((4.2, 4.8), (1.8, 2.1), (1.5, 1.7)),
    "pedestrian": ((0.5, 0.7), (0.5, 0.7), (1.6, 1.8)),
    "barrier": ((1.8, 2.2), (0.4, 0.6), (0.9, 1.1)),
}
_INTENSITY = {
    "car": (0.30, 0.55),
    "pedestrian": (0.55, 0.85),
    "barrier": (0.20, 0.45),
    "ground": (0.05, 0.25),
}
GROUND_Z = -1.5
_PLACE_RANGE = 28.0  # keep object centers well inside the 32 m extent


@dataclass(frozen=True)
class SceneSpec:
    """Scene content knobs; a pure function of these plus (seed, index)."""

    seed: int = 0
    n_cars: int = 5
    n_pedestrians: int = 4
    n_barriers: int = 3
    clutter_rate: float = 8.0
    points_per_object: float = 60.0
    ground_point_density: float = 1.0

    def __post_init__(self):
        if min(self.n_cars, self.n_pedestrians, self.n_barriers) < 0:
            raise ValueError("object counts must be >= 0")
        if min(self.clutter_rate, self.points_per_object, self.ground_point_density) < 0:
            raise ValueError("rates and densities must be >= 0")


@dataclass
class Sample:
    """One scene: points (N, 4: x, y, z, intensity), map, truth boxes."""

    points: np.ndarray
    map: HdMap
    boxes: list[Box3D]
    sample_id: str


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _strip_polygon(frame, u_lo, u_hi, v_lo, v_hi) -> Polygon:
    d, n, off = frame
    corners_uv = [(u_lo, v_lo), (u_hi, v_lo), (u_hi, v_hi), (u_lo, v_hi)]
    pts = [u * d + (v + off) * n for u, v in corners_uv]
    return Polygon(np.array(pts))


def _to_world(frame, u, v):
    d, n, off = frame
    p = u * d + (v + off) * n
    return float(p[0]), float(p[1])


def _sample_box_surface(rng, box: Box3D, count: int) -> np.ndarray:
    l, w, h = box.size
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    a = rng.uniform(-0.5, 0.5, size=count)
    b = rng.uniform(-0.5, 0.5, size=count)
    local = np.empty((count, 3))
    for i, f in enumerate(faces):
        if f < 2:  # +-x faces
            local[i] = ((1 if f == 0 else -1) * l / 2, a[i] * w, b[i] * h)
        elif f < 4:  # +-y faces
            local[i] = (a[i] * l, (1 if f == 2 else -1) * w / 2, b[i] * h)
        else:  # +-z faces
            local[i] = (a[i] * l, b[i] * w, (1 if f == 4 else -1) * h / 2)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out = np.empty((count, 3))
    out[:, 0] = c * local[:, 0] - s * local[:, 1] + box.center[0]
    out[:, 1] = s * local[:, 0] + c * local[:, 1] + box.center[1]
    out[:, 2] = local[:, 2] + box.center[2]
    return out


def _make_box(rng, cls: str, x: float, y: float, yaw: float) -> Box3D:
    (l_lo, l_hi), (w_lo, w_hi), (h_lo, h_hi) = _DIMS[cls]
    l = rng.uniform(l_lo, l_hi)
    w = rng.uniform(w_lo, w_hi)
    h = rng.uniform(h_lo, h_hi)
    return Box3D(
        center=(x, y, GROUND_Z + h / 2),
        size=(l, w, h),
        yaw=yaw,
        class_id=CLASS_TO_ID.get(cls, 0),
    )


def _min_dist(x, y, placed) -> float:
    if not placed:
        return math.inf
    return min(math.hypot(x - px, y - py) for px, py in placed)


def _object_points(rng, box: Box3D, cls: str, mean_points: float) -> np.ndarray:
    count = int(rng.poisson(mean_points))
    if count == 0:
        return np.zeros((0, 4))
    xyz = _sample_box_surface(rng, box, count)
    lo, hi = _INTENSITY[cls]
    intensity = rng.uniform(lo, hi, size=count)
    return np.column_stack([xyz, intensity])


def _ground_points(rng, poly: Polygon, grid: GridConfig, density: float) -> np.ndarray:
    if density <= 0:
        return np.zeros((0, 4))
    ext = poly.exterior
    x_lo = max(float(ext[:, 0].min()), grid.x_range[0])
    x_hi = min(float(ext[:, 0].max()), grid.x_range[1])
    y_lo = max(float(ext[:, 1].min()), grid.y_range[0])
    y_hi = min(float(ext[:, 1].max()), grid.y_range[1])
    if x_hi <= x_lo or y_hi <= y_lo:
        return np.zeros((0, 4))
    # Poisson over the clipped bounding box, thinned by polygon membership,
    # is an exact Poisson process of the requested density on the overlap.
    lam = density * (x_hi - x_lo) * (y_hi - y_lo)
    n = int(rng.poisson(lam))
    if n == 0:
        return np.zeros((0, 4))
    xy = np.column_stack(
        [rng.uniform(x_lo, x_hi, size=n), rng.uniform(y_lo, y_hi, size=n)]
    )
    keep = np.array([point_in_polygon(p, poly) for p in xy])
    xy = xy[keep]
    m = xy.shape[0]
    z = GROUND_Z + rng.normal(0.0, 0.02, size=m)
    lo, hi = _INTENSITY["ground"]
    intensity = rng.uniform(lo, hi, size=m)
    return np.column_stack([xy, z, intensity])


def generate_scene(spec: SceneSpec, index: int) -> Sample:
    """Deterministic scene for (spec.seed, index)."""
    rng = _scene_rng(spec.seed, index)

    # road frame: direction d, left normal n, lateral centerline offset
    theta = rng.uniform(0.0, math.pi)
    offset = rng.uniform(-6.0, 6.0)
    road_half = rng.uniform(5.0, 7.0)
    walk_w = rng.uniform(2.5, 4.0)
    d = np.array([math.cos(theta), math.sin(theta)])
    n = np.array([-math.sin(theta), math.cos(theta)])
    frame = (d, n, offset)
    span = 48.0

    road = _strip_polygon(frame, -span, span, -road_half, road_half)
    walk_hi = _strip_polygon(frame, -span, span, road_half, road_half + walk_w)
    walk_lo = _strip_polygon(frame, -span, span, -road_half - walk_w, -road_half)
    park_side = rng.uniform(10.0, 16.0)
    park_t = rng.uniform(-20.0, 20.0)
    park_sign = 1.0 if rng.integers(2) else -1.0
    v0 = park_sign * (road_half + walk_w)
    v1 = v0 + park_sign * park_side
    park = _strip_polygon(frame, park_t - park_side / 2, park_t + park_side / 2,
                          min(v0, v1), max(v0, v1))
    hd_map = HdMap(
        {
            LayerKind.DRIVABLE_AREA: [road],
            LayerKind.WALKWAY: [walk_lo, walk_hi],
            LayerKind.CARPARK_AREA: [park],
        }
    )
    all_polys = [road, walk_lo, walk_hi, park]

    placed: list[tuple[float, float]] = []
    boxes: list[Box3D] = []
    clutter: list[tuple[Box3D, str]] = []

    def place(v_lo, v_hi, min_gap):
        x = y = 0.0
        for _ in range(200):
            u = rng.uniform(-_PLACE_RANGE, _PLACE_RANGE)
            v = rng.uniform(v_lo, v_hi)
            x, y = _to_world(frame, u, v)
            if max(abs(x), abs(y)) <= _PLACE_RANGE and _min_dist(x, y, placed) >= min_gap:
                break
        placed.append((x, y))
        return x, y

    for _ in range(spec.n_cars):
        x, y = place(-(road_half - 1.3), road_half - 1.3, 3.0)
        yaw = theta + math.pi * int(rng.integers(2)) + rng.normal(0.0, 0.05)
        boxes.append(_make_box(rng, "car", x, y, yaw))
    for _ in range(spec.n_pedestrians):
        side = 1.0 if rng.integers(2) else -1.0
        v_in = side * (road_half + 0.5)
        v_out = side * (road_half + walk_w - 0.5)
        x, y = place(min(v_in, v_out), max(v_in, v_out), 1.0)
        boxes.append(_make_box(rng, "pedestrian", x, y, rng.uniform(-math.pi, math.pi)))
    for _ in range(spec.n_barriers):
        side = 1.0 if rng.integers(2) else -1.0
        v_edge = side * (road_half - 0.5)
        x, y = place(v_edge, v_edge, 2.5)
        boxes.append(_make_box(rng, "barrier", x, y, theta + rng.normal(0.0, 0.05)))

    n_clutter = int(rng.poisson(spec.clutter_rate))
    for _ in range(n_clutter):
        cls = "car" if rng.uniform() < 0.5 else "pedestrian"
        for _ in range(100):
            if rng.uniform() < 0.5:
                # just beyond the walkway strip: the hard false-positive bait
                side = 1.0 if rng.integers(2) else -1.0
                u = rng.uniform(-_PLACE_RANGE, _PLACE_RANGE)
                v = side * (road_half + walk_w + rng.uniform(0.8, 5.0))
                x, y = _to_world(frame, u, v)
            else:
                x = rng.uniform(-_PLACE_RANGE, _PLACE_RANGE)
                y = rng.uniform(-_PLACE_RANGE, _PLACE_RANGE)
            if max(abs(x), abs(y)) > _PLACE_RANGE:
                continue
            if any(point_in_polygon((x, y), p) for p in all_polys):
                continue
            if _min_dist(x, y, placed) < 2.0:
                continue
            placed.append((x, y))
            yaw = rng.uniform(-math.pi, math.pi)
            clutter.append((_make_box(rng, cls, x, y, yaw), cls))
            break

    chunks = []
    for kind in LayerKind:
        for poly in hd_map.polygons(kind):
            chunks.append(_ground_points(rng, poly, GridConfig(), spec.ground_point_density))
    for box in boxes:
        chunks.append(_object_points(rng, box, CLASSES[box.class_id], spec.points_per_object))
    for box, cls in clutter:
        chunks.append(_object_points(rng, box, cls, spec.points_per_object))

    points = np.vstack(chunks) if chunks else np.zeros((0, 4))
    return Sample(points=points, map=hd_map, boxes=boxes, sample_id=f"s{index:05d}")


def boxes_to_json(boxes: list[Box3D]) -> list[dict]:
    return [
        {
            "class": CLASSES[b.class_id],
            "x": b.center[0],
            "y": b.center[1],
            "z": b.center[2],
            "l": b.size[0],
            "w": b.size[1],
            "h": b.size[2],
            "yaw": b.yaw,
        }
        for b in boxes
    ]


def boxes_from_json(entries: list[dict]) -> list[Box3D]:
    return [
        Box3D(
            center=(e["x"], e["y"], e["z"]),
            size=(e["l"], e["w"], e["h"]),
            yaw=e["yaw"],
            class_id=CLASS_TO_ID[e["class"]],
        )
        for e in entries
    ]


@dataclass
class DatasetIndex:
    root: Path
    train_ids: list[str]
    val_ids: list[str]
    grid: GridConfig
    classes: tuple[str, ...]


def generate_dataset(
    spec: SceneSpec, n_train: int, n_val: int, out_path: str | Path
) -> DatasetIndex:
    """Write the on-disk dataset; bytes are a pure function of the inputs."""
    root = Path(out_path)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    grid = GridConfig()
    ids = []
    for index in range(n_train + n_val):
        sample = generate_scene(spec, index)
        ids.append(sample.sample_id)
        sdir = root / "samples" / sample.sample_id
        sdir.mkdir(parents=True, exist_ok=True)
        (sdir / "points.bin").write_bytes(
            np.ascontiguousarray(sample.points, dtype="<f4").tobytes()
        )
        (sdir / "map.json").write_bytes(save_map(sample.map))
        (sdir / "boxes.json").write_text(
            json.dumps(boxes_to_json(sample.boxes), sort_keys=True)
        )
    index_doc = {
        "train": ids[:n_train],
        "val": ids[n_train : n_train + n_val],
        "grid": grid.to_json(),
        "classes": list(CLASSES),
    }
    (root / "index.json").write_text(json.dumps(index_doc, sort_keys=True, indent=2))
    return load_dataset(root)


def load_dataset(path: str | Path) -> DatasetIndex:
    root = Path(path)
    try:
        doc = json.loads((root / "index.json").read_text())
    except OSError as e:
        raise FileNotFoundError(f"cannot read dataset index at {root}: {e}") from e
    return DatasetIndex(
        root=root,
        train_ids=list(doc["train"]),
        val_ids=list(doc["val"]),
        grid=GridConfig.from_json(doc["grid"]),
        classes=tuple(doc["classes"]),
    )


def load_sample(index: DatasetIndex, sample_id: str) -> Sample:
    sdir = index.root / "samples" / sample_id
    if not sdir.is_dir():
        raise FileNotFoundError(f"sample {sample_id!r} not found under {index.root}")
    raw = np.frombuffer((sdir / "points.bin").read_bytes(), dtype="<f4")
    points = raw.reshape(-1, 4).astype(np.float64)
    hd_map = load_map((sdir / "map.json").read_bytes())
    boxes = boxes_from_json(json.loads((sdir / "boxes.json").read_text()))
    return Sample(points=points, map=hd_map, boxes=boxes, sample_id=sample_id)


def validate_sample(sample: Sample, grid: GridConfig) -> list[str]:
    """Invariant violations as messages; empty list means valid."""
    problems = []
    if sample.points.ndim != 2 or (sample.points.size and sample.points.shape[1] != 4):
        problems.append(f"points must be (N, 4), got {sample.points.shape}")
    for i, b in enumerate(sample.boxes):
        z_lo = b.center[2] - b.size[2] / 2
        z_hi = b.center[2] + b.size[2] / 2
        if z_lo < grid.z_range[0] or z_hi > grid.z_range[1]:
            problems.append(f"box {i} outside grid z range: [{z_lo:.2f}, {z_hi:.2f}]")
    if sample.points.shape[0]:
        x, y, z = sample.points[:, 0], sample.points[:, 1], sample.points[:, 2]
        outside = (
            (x < grid.x_range[0])
            | (x >= grid.x_range[1])
            | (y < grid.y_range[0])
            | (y >= grid.y_range[1])
            | (z < grid.z_range[0])
            | (z > grid.z_range[1])
        )
        frac = float(outside.mean())
        if frac >= 0.05:
            problems.append(f"{frac:.1%} of points outside the grid (limit 5%)")
    return problems


def replace_map(sample: Sample, new_map: HdMap) -> Sample:
    return dataclasses.replace(sample, map=new_map)
