"""Fusion network: map feature extractor over the raster stack, channel
aggregation variants, training-only map segmentation head, and the
center-style detection head with its target codec.

Spatial size is preserved end to end, so every feature map shares the
GridConfig's H x W and channel concatenation never needs resampling.  The
segmentation head branches off the pre-fusion pillar features and feeds
nothing downstream, which makes it droppable at inference by
construction.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from mapfusion.autodiff import (
    ModelParams,
    Tensor,
    add,
    bce_with_logits,
    concat_channels,
    conv2d,
    l1_masked,
    mul_scalar,
    penalty_reduced_focal,
    relu,
)
from mapfusion.geometry import Box3D, GridConfig, bev_cell_of
from mapfusion.nn_blocks import apply_conv_block, build_conv_block, init_rng, kaiming_uniform
from mapfusion.pillar_encoder import LIFT_CHANNELS, build_pillar_lift, pillar_lift

REG_CHANNELS = 8  # dx, dy, z, log l, log w, log h, sin yaw, cos yaw
MAP_FE_CHANNELS = (16, 16, 32, 32, 64, 64)
RASTER_CHANNELS = 3
# start the class heatmaps at sigmoid(-2.19) ~= 0.1 background probability;
# a zero start wastes most of a short schedule suppressing background
HEATMAP_BIAS_INIT = -2.19


class FusionMode(str, enum.Enum):
    BASELINE_NO_MAP = "baseline_no_map"
    SIMPLE_CONCAT = "simple_concat"
    DEEP_CONCAT_V1 = "deep_concat_v1"
    DEEP_CONCAT_V2 = "deep_concat_v2"


# CLI variant name -> (fusion mode, mapseg enabled)
VARIANTS = {
    "baseline": (FusionMode.BASELINE_NO_MAP, False),
    "mapseg": (FusionMode.BASELINE_NO_MAP, True),
    "featureagg": (FusionMode.DEEP_CONCAT_V2, False),
    "featureagg-simple": (FusionMode.SIMPLE_CONCAT, False),
    "featureagg-v1": (FusionMode.DEEP_CONCAT_V1, False),
    "featureagg-v2": (FusionMode.DEEP_CONCAT_V2, False),
    "full": (FusionMode.DEEP_CONCAT_V2, True),
}


@dataclass(frozen=True)
class NetConfig:
    fusion: FusionMode = FusionMode.DEEP_CONCAT_V2
    mapseg: bool = True
    n_classes: int = 3

    @property
    def fused_channels(self) -> int:
        if self.fusion in (FusionMode.BASELINE_NO_MAP, FusionMode.DEEP_CONCAT_V1):
            return LIFT_CHANNELS
        return LIFT_CHANNELS + MAP_FE_CHANNELS[-1]

    def to_json(self) -> dict:
        return {
            "fusion": self.fusion.value,
            "mapseg": self.mapseg,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_json(cls, d: dict) -> "NetConfig":
        return cls(
            fusion=FusionMode(d["fusion"]),
            mapseg=bool(d["mapseg"]),
            n_classes=int(d["n_classes"]),
        )


def build_params(cfg: NetConfig, seed: int, dtype=np.float32) -> ModelParams:
    """All learnable tensors for the configured variant.

    Initialization is keyed by (seed, name), so tensors shared between
    variants are identical for identical seeds.
    """
    params = ModelParams()
    build_pillar_lift(params, seed, dtype)
    if cfg.fusion != FusionMode.BASELINE_NO_MAP:
        c_in = RASTER_CHANNELS
        for i, c_out in enumerate(MAP_FE_CHANNELS, start=1):
            build_conv_block(params, f"map_fe.block{i}", c_in, c_out, 3, seed, dtype)
            c_in = c_out
        if cfg.fusion in (FusionMode.DEEP_CONCAT_V1, FusionMode.DEEP_CONCAT_V2):
            concat_ch = LIFT_CHANNELS + MAP_FE_CHANNELS[-1]
            name = "agg.conv.w"
            params.add_param(
                name,
                kaiming_uniform(
                    init_rng(seed, name),
                    (cfg.fused_channels, concat_ch, 1, 1),
                    concat_ch,
                    dtype,
                ),
            )
            params.add_param("agg.conv.b", np.zeros(cfg.fused_channels, dtype))
    build_conv_block(params, "head.trunk1", cfg.fused_channels, 64, 3, seed, dtype)
    build_conv_block(params, "head.trunk2", 64, 64, 3, seed, dtype)
    for name, c_out in (("head.heat", cfg.n_classes), ("head.reg", REG_CHANNELS)):
        wname = f"{name}.w"
        params.add_param(
            wname, kaiming_uniform(init_rng(seed, wname), (c_out, 64, 1, 1), 64, dtype)
        )
        bias0 = HEATMAP_BIAS_INIT if name == "head.heat" else 0.0
        params.add_param(f"{name}.b", np.full(c_out, bias0, dtype))
    if cfg.mapseg:
        for i in range(1, 4):
            build_conv_block(params, f"seg.block{i}", LIFT_CHANNELS, LIFT_CHANNELS, 3, seed, dtype)
        build_conv_block(params, "seg.block4", LIFT_CHANNELS, LIFT_CHANNELS, 3, seed, dtype)
        wname = "seg.out.w"
        params.add_param(
            wname,
            kaiming_uniform(
                init_rng(seed, wname), (RASTER_CHANNELS, LIFT_CHANNELS, 1, 1), LIFT_CHANNELS, dtype
            ),
        )
        params.add_param("seg.out.b", np.zeros(RASTER_CHANNELS, dtype))
    return params


def map_feature_extractor(raster: Tensor | np.ndarray, params: ModelParams, training: bool) -> Tensor:
    """Six conv-bn-relu blocks over the 3-channel raster, size preserving."""
    x = raster if isinstance(raster, Tensor) else Tensor(raster)
    if x.shape[0] != RASTER_CHANNELS:
        raise ValueError(f"map extractor expects {RASTER_CHANNELS} channels, got {x.shape[0]}")
    for i in range(1, len(MAP_FE_CHANNELS) + 1):
        x = apply_conv_block(x, params, f"map_fe.block{i}", training)
    return x


def feature_agg(voxel: Tensor, map_feat: Tensor, mode: FusionMode, params: ModelParams) -> Tensor:
    """Channel concat, optionally refined by a 1x1 conv (+relu).

    deep_concat_v1 compresses back to the voxel channel count;
    deep_concat_v2 keeps the concatenated width.
    """
    if mode == FusionMode.BASELINE_NO_MAP:
        raise ValueError("feature_agg is bypassed entirely in baseline mode")
    fused = concat_channels(voxel, map_feat)
    if mode == FusionMode.SIMPLE_CONCAT:
        return fused
    out = conv2d(fused, params.param("agg.conv.w"), params.param("agg.conv.b"))
    return relu(out)


def map_seg_head(voxel: Tensor, params: ModelParams, training: bool) -> Tensor:
    """Training-only head predicting the raster from pre-fusion features."""
    x = voxel
    for i in range(1, 4):
        x = apply_conv_block(x, params, f"seg.block{i}", training)
    x = apply_conv_block(x, params, "seg.block4", training)
    return conv2d(x, params.param("seg.out.w"), params.param("seg.out.b"))


def detection_head(fused: Tensor, params: ModelParams, training: bool) -> tuple[Tensor, Tensor]:
    x = apply_conv_block(fused, params, "head.trunk1", training)
    x = apply_conv_block(x, params, "head.trunk2", training)
    heat = conv2d(x, params.param("head.heat.w"), params.param("head.heat.b"))
    reg = conv2d(x, params.param("head.reg.w"), params.param("head.reg.b"))
    return heat, reg


@dataclass
class ForwardOut:
    heatmap_logits: Tensor
    regression: Tensor
    seg_logits: Tensor | None


def forward(
    params: ModelParams,
    cfg: NetConfig,
    raw_pillars: np.ndarray,
    raster: np.ndarray | None,
    training: bool,
    want_seg: bool = False,
) -> ForwardOut:
    """Full network pass; ``raster`` is never touched in baseline mode."""
    voxel = pillar_lift(raw_pillars, params, training)
    seg = None
    if want_seg:
        if not cfg.mapseg:
            raise ValueError("segmentation output requested but mapseg is disabled")
        seg = map_seg_head(voxel, params, training)
    if cfg.fusion == FusionMode.BASELINE_NO_MAP:
        fused = voxel
    else:
        if raster is None:
            raise ValueError(f"fusion mode {cfg.fusion.value} requires a raster")
        map_feat = map_feature_extractor(Tensor(raster), params, training)
        fused = feature_agg(voxel, map_feat, cfg.fusion, params)
    heat, reg = detection_head(fused, params, training)
    return ForwardOut(heat, reg, seg)


@dataclass
class HeadOutputs:
    """Decoded-side view of the head tensors (plain arrays)."""

    heatmap_logits: np.ndarray
    regression: np.ndarray

    @classmethod
    def from_forward(cls, out: ForwardOut) -> "HeadOutputs":
        return cls(out.heatmap_logits.data, out.regression.data)


@dataclass
class Targets:
    heatmap: np.ndarray
    regression: np.ndarray
    mask: np.ndarray
    n_skipped: int


def gaussian_radius_px(box: Box3D, grid: GridConfig) -> float:
    cell = min(grid.cell_w, grid.cell_h)
    return max(1.0, min(box.size[0], box.size[1]) / (2.0 * cell))


def encode_targets(boxes: list[Box3D], grid: GridConfig, n_classes: int) -> Targets:
    """Gaussian center splats plus per-center regression targets.

    Boxes whose center misses the grid are skipped and counted.
    """
    heat = np.zeros((n_classes, grid.height_px, grid.width_px), np.float32)
    reg = np.zeros((REG_CHANNELS, grid.height_px, grid.width_px), np.float32)
    mask = np.zeros((grid.height_px, grid.width_px), np.float32)
    skipped = 0
    for box in boxes:
        cell = bev_cell_of(box.center[:2], grid)
        if cell is None:
            skipped += 1
            continue
        row, col = cell
        radius = gaussian_radius_px(box, grid)
        sigma = radius / 3.0
        reach = int(math.ceil(radius))
        r_lo, r_hi = max(0, row - reach), min(grid.height_px - 1, row + reach)
        c_lo, c_hi = max(0, col - reach), min(grid.width_px - 1, col + reach)
        dr = np.arange(r_lo, r_hi + 1) - row
        dc = np.arange(c_lo, c_hi + 1) - col
        patch = np.exp(-(dr[:, None] ** 2 + dc[None, :] ** 2) / (2.0 * sigma**2))
        ch = heat[box.class_id, r_lo : r_hi + 1, c_lo : c_hi + 1]
        np.maximum(ch, patch, out=ch)
        dx = (box.center[0] - grid.x_range[0]) / grid.cell_w - col - 0.5
        dy = (box.center[1] - grid.y_range[0]) / grid.cell_h - row - 0.5
        reg[:, row, col] = (
            dx,
            dy,
            box.center[2],
            math.log(box.size[0]),
            math.log(box.size[1]),
            math.log(box.size[2]),
            math.sin(box.yaw),
            math.cos(box.yaw),
        )
        mask[row, col] = 1.0
    return Targets(heat, reg, mask, skipped)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _local_max_3x3(p: np.ndarray) -> np.ndarray:
    """Cells >= every 8-neighbor (edges padded with -inf)."""
    padded = np.full((p.shape[0] + 2, p.shape[1] + 2), -np.inf)
    padded[1:-1, 1:-1] = p
    keep = np.ones_like(p, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            keep &= p >= padded[1 + dr : 1 + dr + p.shape[0], 1 + dc : 1 + dc + p.shape[1]]
    return keep


def decode_detections(
    head: HeadOutputs,
    grid: GridConfig,
    score_threshold: float = 0.1,
    max_dets: int = 100,
) -> list[tuple[Box3D, float]]:
    """Local-maximum extraction over the sigmoid heatmap.

    Detections sort by descending score with stable (class, row, col)
    insertion order for ties, then truncate to ``max_dets``.
    """
    prob = _stable_sigmoid(head.heatmap_logits.astype(np.float64))
    dets: list[tuple[Box3D, float]] = []
    for class_id in range(prob.shape[0]):
        p = prob[class_id]
        keep = _local_max_3x3(p) & (p > score_threshold)
        for row, col in np.argwhere(keep):
            r = head.regression[:, row, col].astype(np.float64)
            x = grid.x_range[0] + (col + 0.5 + r[0]) * grid.cell_w
            y = grid.y_range[0] + (row + 0.5 + r[1]) * grid.cell_h
            box = Box3D(
                center=(float(x), float(y), float(r[2])),
                size=(math.exp(r[3]), math.exp(r[4]), math.exp(r[5])),
                yaw=math.atan2(r[6], r[7]),
                class_id=class_id,
            )
            dets.append((box, float(p[row, col])))
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    return [dets[i] for i in order[:max_dets]]


def total_loss(
    out: ForwardOut,
    targets: Targets,
    raster: np.ndarray | None,
    lambda_seg: float = 1.0,
) -> tuple[Tensor, dict[str, float]]:
    """Focal + masked L1, plus the weighted seg BCE when the head ran."""
    if lambda_seg < 0:
        raise ValueError("lambda_seg must be >= 0")
    focal = penalty_reduced_focal(out.heatmap_logits, targets.heatmap)
    l1 = l1_masked(out.regression, targets.regression, targets.mask)
    loss = add(focal, l1)
    parts = {"det_focal": focal.item(), "det_l1": l1.item(), "seg_bce": 0.0}
    if out.seg_logits is not None:
        if raster is None:
            raise ValueError("seg loss requires the ground-truth raster")
        seg = bce_with_logits(out.seg_logits, raster.astype(out.seg_logits.dtype))
        parts["seg_bce"] = seg.item()
        loss = add(loss, mul_scalar(seg, lambda_seg))
    return loss, parts
