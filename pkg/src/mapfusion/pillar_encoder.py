"""Point cloud to dense BEV pillar features on the shared grid.

``pillarize`` aggregates hand-crafted per-cell statistics;
``pillar_lift`` is the learned 1x1 embedding that follows it.  Both stages
keep the grid's H x W so pillar features align with the map raster.
"""

from __future__ import annotations

import numpy as np

from mapfusion.autodiff import ModelParams, Tensor
from mapfusion.geometry import GridConfig
from mapfusion.nn_blocks import apply_conv_block, build_conv_block

RAW_CHANNELS = 6
LIFT_CHANNELS = 32


def pillarize(points: np.ndarray, grid: GridConfig) -> np.ndarray:
    """Aggregate points into a (6, H, W) float32 grid.

    Channels: occupancy, log1p(count), mean z, max z, mean intensity,
    mean 3D range from the sensor origin.  Empty cells stay all-zero;
    points outside the grid (x/y cell range, or z outside z_range) are
    ignored.  Points are reduced in a canonical sort order, so any input
    permutation produces bitwise-identical output.
    """
    out = np.zeros((RAW_CHANNELS, grid.height_px, grid.width_px), np.float32)
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return out
    x, y, z, intensity = pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3]
    col = np.floor((x - grid.x_range[0]) / grid.cell_w).astype(np.int64)
    row = np.floor((y - grid.y_range[0]) / grid.cell_h).astype(np.int64)
    valid = (
        (col >= 0)
        & (col < grid.width_px)
        & (row >= 0)
        & (row < grid.height_px)
        & (z >= grid.z_range[0])
        & (z <= grid.z_range[1])
    )
    if not valid.any():
        return out
    x, y, z, intensity = x[valid], y[valid], z[valid], intensity[valid]
    cell = row[valid] * grid.width_px + col[valid]

    order = np.lexsort((intensity, z, y, x, cell))
    cell = cell[order]
    x, y, z, intensity = x[order], y[order], z[order], intensity[order]
    rng_dist = np.sqrt(x * x + y * y + z * z)

    starts = np.flatnonzero(np.diff(cell, prepend=-1))
    counts = np.diff(starts, append=cell.size).astype(np.float64)
    cells = cell[starts]
    rows, cols = cells // grid.width_px, cells % grid.width_px

    out[0, rows, cols] = 1.0
    out[1, rows, cols] = np.log1p(counts)
    out[2, rows, cols] = np.add.reduceat(z, starts) / counts
    out[3, rows, cols] = np.maximum.reduceat(z, starts)
    out[4, rows, cols] = np.add.reduceat(intensity, starts) / counts
    out[5, rows, cols] = np.add.reduceat(rng_dist, starts) / counts
    return out


def build_pillar_lift(params: ModelParams, seed: int, dtype=np.float32) -> None:
    build_conv_block(params, "pillar.lift", RAW_CHANNELS, LIFT_CHANNELS, 1, seed, dtype)


def pillar_lift(raw: np.ndarray | Tensor, params: ModelParams, training: bool) -> Tensor:
    """Learned per-cell embedding: 1x1 conv, batchnorm, relu."""
    x = raw if isinstance(raw, Tensor) else Tensor(raw)
    return apply_conv_block(x, params, "pillar.lift", training)
