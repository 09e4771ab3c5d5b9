"""Static BEV renderings as binary PPM images.

The composite paints map layers as tinted background, lidar points as
intensity-scaled dots, ground-truth boxes in yellow, and predictions in
cyan.  Output dimensions are an integer upscale of the grid, and metric
coordinates map to pixels with the same floor quantization everywhere:
``u = floor((x - x_min) / cell_w * scale)`` (and likewise for rows), so
drawn geometry can be cross-checked against the grid mapping directly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from mapfusion.geometry import Box3D, GridConfig
from mapfusion.hdmap import LayerKind, RasterStack
from mapfusion.scene_gen import Sample

LAYER_TINTS = {
    LayerKind.DRIVABLE_AREA: (70, 80, 115),
    LayerKind.WALKWAY: (60, 110, 65),
    LayerKind.CARPARK_AREA: (105, 65, 115),
}
GT_COLOR = (255, 220, 0)
PRED_COLOR = (0, 255, 255)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Binary P6 with 8-bit channels."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("write_ppm expects (H, W, 3) uint8")
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.tobytes())


def pixel_of(x: float, y: float, grid: GridConfig, scale: int) -> tuple[int, int]:
    """(row, col) in the upscaled image for a metric point."""
    col = int(np.floor((x - grid.x_range[0]) / grid.cell_w * scale))
    row = int(np.floor((y - grid.y_range[0]) / grid.cell_h * scale))
    return row, col


def box_corner_pixels(box: Box3D, grid: GridConfig, scale: int) -> list[tuple[int, int]]:
    return [pixel_of(cx, cy, grid, scale) for cx, cy in box.bev_corners()]


def _draw_line(img: np.ndarray, r0: int, c0: int, r1: int, c1: int, color) -> None:
    # Bresenham with per-pixel clipping; endpoints inclusive
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dr - dc
    r, c = r0, c0
    h, w = img.shape[:2]
    while True:
        if 0 <= r < h and 0 <= c < w:
            img[r, c] = color
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dc:
            err -= dc
            r += sr
        if e2 < dr:
            err += dr
            c += sc


def draw_box_outline(img: np.ndarray, box: Box3D, grid: GridConfig, scale: int, color) -> None:
    corners = box_corner_pixels(box, grid, scale)
    for i in range(4):
        r0, c0 = corners[i]
        r1, c1 = corners[(i + 1) % 4]
        _draw_line(img, r0, c0, r1, c1, color)


def upscale(img: np.ndarray, scale: int) -> np.ndarray:
    return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)


def render_raster_composite(raster: RasterStack, scale: int = 4) -> np.ndarray:
    """Tinted map channels on black, later layers painting over earlier."""
    grid = raster.grid
    img = np.zeros((grid.height_px, grid.width_px, 3), np.uint8)
    for kind in LayerKind:
        img[raster.channels[kind] > 0] = LAYER_TINTS[kind]
    return upscale(img, scale)


def render_scene(
    sample: Sample,
    raster: RasterStack,
    scale: int = 4,
    detections: list[tuple[Box3D, float]] | None = None,
) -> np.ndarray:
    """Full BEV composite: map, points, truth in yellow, predictions cyan."""
    grid = raster.grid
    img = render_raster_composite(raster, scale)
    h, w = img.shape[:2]
    for x, y, _, intensity in sample.points:
        r, c = pixel_of(x, y, grid, scale)
        if 0 <= r < h and 0 <= c < w:
            level = int(140 + 115 * min(1.0, max(0.0, intensity)))
            img[r, c] = (level, level, level)
    for box in sample.boxes:
        draw_box_outline(img, box, grid, scale, GT_COLOR)
    for box, _ in detections or []:
        draw_box_outline(img, box, grid, scale, PRED_COLOR)
    return img


def render_seg_panel(seg_prob: np.ndarray, scale: int = 4) -> np.ndarray:
    """Segmentation sigmoid as RGB: drivable red, walkway green, carpark blue."""
    if seg_prob.ndim != 3 or seg_prob.shape[0] != 3:
        raise ValueError("seg panel expects (3, H, W) probabilities")
    rgb = np.clip(seg_prob * 255.0, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return upscale(np.ascontiguousarray(rgb), scale)
