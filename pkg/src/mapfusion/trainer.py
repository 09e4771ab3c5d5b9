"""Training loop wiring dataset, synchronized augmentation, network,
losses, optimizer, and the one-cycle schedule.

Every randomized decision draws from a Philox stream keyed by (seed,
domain, index) rather than from one mutable stream, so the metrics log is
a pure function of (config, dataset bytes) and augmentation for step t
never depends on what ran before it.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mapfusion.autodiff import adamw_step, init_optim_state, one_cycle_lr
from mapfusion.autodiff.checkpoint import load_checkpoint, restore_params, save_checkpoint
from mapfusion.geometry import AugmentParams, GridConfig, Pose2D, apply_augment
from mapfusion.hdmap import render_ego_raster
from mapfusion.evaluator import MetricsReport, compute_metrics
from mapfusion.model import (
    FusionMode,
    HeadOutputs,
    NetConfig,
    build_params,
    decode_detections,
    encode_targets,
    forward,
    total_loss,
)
from mapfusion.pillar_encoder import pillarize
from mapfusion.scene_gen import DatasetIndex, Sample, load_dataset, load_sample

log = logging.getLogger(__name__)

_DOMAIN_AUGMENT = 1 << 32
_DOMAIN_SHUFFLE = 2 << 32


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    data_dir: str
    out_dir: str
    epochs: int = 20
    max_lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_seg: float = 1.0
    fusion: str = FusionMode.DEEP_CONCAT_V2.value
    mapseg: bool = True
    seed: int = 0
    augment: bool = True
    score_threshold: float = 0.1
    max_dets: int = 100

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if self.lambda_seg < 0:
            raise ValueError("lambda_seg must be >= 0")
        FusionMode(self.fusion)  # validates the name

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict, **overrides) -> "TrainConfig":
        merged = {**d, **{k: v for k, v in overrides.items() if v is not None}}
        return cls(**merged)


@dataclass
class TrainResult:
    best_val_map: float
    best_val_nds: float
    best_epoch: int
    best_ckpt: Path
    metrics_path: Path
    records: list[dict]


def _stream(seed: int, domain: int, index: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, domain + index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_augment_params(rng: np.random.Generator) -> AugmentParams:
    """Rotation U[-pi/4, pi/4], independent coin flips, scale U[0.95, 1.05]."""
    rotation = rng.uniform(-math.pi / 4, math.pi / 4)
    flip_x = bool(rng.uniform() < 0.5)
    flip_y = bool(rng.uniform() < 0.5)
    scale = rng.uniform(0.95, 1.05)
    return AugmentParams(rotation=rotation, flip_x=flip_x, flip_y=flip_y, scale=scale)


def infer_sample(
    params,
    net_cfg: NetConfig,
    sample: Sample,
    grid: GridConfig,
    score_threshold: float,
    max_dets: int,
):
    """Inference-path detections: no augmentation, eval-mode batchnorm,
    segmentation head never evaluated."""
    raw = pillarize(sample.points, grid)
    raster = None
    if net_cfg.fusion != FusionMode.BASELINE_NO_MAP:
        raster = render_ego_raster(sample.map, Pose2D(), grid).as_float()
    out = forward(params, net_cfg, raw, raster, training=False, want_seg=False)
    return decode_detections(HeadOutputs.from_forward(out), grid, score_threshold, max_dets)


def evaluate_params(
    params,
    net_cfg: NetConfig,
    index: DatasetIndex,
    sample_ids: list[str],
    score_threshold: float = 0.1,
    max_dets: int = 100,
) -> MetricsReport:
    dets, gts = [], []
    for sid in sample_ids:
        sample = load_sample(index, sid)
        dets.append(
            infer_sample(params, net_cfg, sample, index.grid, score_threshold, max_dets)
        )
        gts.append(sample.boxes)
    return compute_metrics(dets, gts, n_classes=len(index.classes))


def checkpoint_config(net_cfg: NetConfig, index: DatasetIndex) -> dict:
    return {
        "net": net_cfg.to_json(),
        "grid": index.grid.to_json(),
        "classes": list(index.classes),
    }


def load_net_checkpoint(path: str | Path):
    """Rebuild (params, net_cfg, grid, classes) from a checkpoint file."""
    ckpt = load_checkpoint(str(path))
    if not ckpt.config or "net" not in ckpt.config:
        from mapfusion.autodiff.checkpoint import CheckpointError

        raise CheckpointError(f"{path}: checkpoint lacks the network config blob")
    net_cfg = NetConfig.from_json(ckpt.config["net"])
    grid = GridConfig.from_json(ckpt.config["grid"])
    classes = tuple(ckpt.config["classes"])
    params = build_params(net_cfg, seed=0)
    restore_params(params, ckpt, str(path))
    return params, net_cfg, grid, classes


def train(cfg: TrainConfig) -> TrainResult:
    """Run the configured training; writes per-epoch checkpoints, a best
    checkpoint, and a line-delimited metrics log."""
    index = load_dataset(cfg.data_dir)
    grid = index.grid
    net_cfg = NetConfig(
        fusion=FusionMode(cfg.fusion),
        mapseg=cfg.mapseg,
        n_classes=len(index.classes),
    )
    params = build_params(net_cfg, cfg.seed)
    optim = init_optim_state(
        params,
        max_lr=cfg.max_lr,
        weight_decay=cfg.weight_decay,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
    )
    train_samples = [load_sample(index, sid) for sid in index.train_ids]
    if not train_samples:
        raise ValueError(f"dataset at {cfg.data_dir} has no training samples")
    n_train = len(train_samples)
    total_steps = cfg.epochs * n_train
    needs_raster = net_cfg.fusion != FusionMode.BASELINE_NO_MAP or net_cfg.mapseg

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "train_config.json").write_text(
        json.dumps(cfg.to_json(), sort_keys=True, indent=2)
    )
    metrics_path = out_dir / "metrics.jsonl"
    records: list[dict] = []
    best_map, best_nds, best_epoch = -1.0, 0.0, 0
    best_path = out_dir / "best.ckpt"

    with open(metrics_path, "w") as metrics_file:
        for epoch in range(1, cfg.epochs + 1):
            order = _stream(cfg.seed, _DOMAIN_SHUFFLE, epoch).permutation(n_train)
            det_losses, seg_losses = [], []
            lr = cfg.max_lr
            for pos, sample_idx in enumerate(order):
                step = (epoch - 1) * n_train + pos
                lr = one_cycle_lr(step, total_steps, cfg.max_lr)
                if cfg.augment:
                    aug = sample_augment_params(_stream(cfg.seed, _DOMAIN_AUGMENT, step))
                    sample = apply_augment(train_samples[sample_idx], aug)
                else:
                    sample = train_samples[sample_idx]
                raster = None
                if needs_raster:
                    # re-render from the augmented polygons: the raster fed to
                    # the network (and the seg target) lives in the same frame
                    # as the augmented points and boxes
                    raster = render_ego_raster(sample.map, Pose2D(), grid).as_float()
                raw = pillarize(sample.points, grid)
                targets = encode_targets(sample.boxes, grid, net_cfg.n_classes)
                out = forward(
                    params, net_cfg, raw, raster, training=True, want_seg=net_cfg.mapseg
                )
                loss, parts = total_loss(
                    out, targets, raster if net_cfg.mapseg else None, cfg.lambda_seg
                )
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step}: {parts}"
                    )
                params.zero_grad()
                loss.backward()
                adamw_step(params, optim, lr)
                det_losses.append(parts["det_focal"] + parts["det_l1"])
                seg_losses.append(parts["seg_bce"])

            report = evaluate_params(
                params, net_cfg, index, index.val_ids, cfg.score_threshold, cfg.max_dets
            )
            record = {
                "epoch": epoch,
                "train_det_loss": float(np.mean(det_losses)),
                "train_seg_loss": float(np.mean(seg_losses)),
                "val_mAP": report.mean_ap,
                "val_NDS_lite": report.nds_lite,
                "lr_last": lr,
            }
            records.append(record)
            metrics_file.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_file.flush()
            log.info(
                "epoch %d/%d det=%.4f seg=%.4f mAP=%.4f NDS=%.4f",
                epoch, cfg.epochs, record["train_det_loss"],
                record["train_seg_loss"], record["val_mAP"], record["val_NDS_lite"],
            )
            epoch_path = out_dir / f"epoch_{epoch:03d}.ckpt"
            save_checkpoint(str(epoch_path), params, config=checkpoint_config(net_cfg, index))
            if report.mean_ap > best_map:
                best_map, best_nds, best_epoch = report.mean_ap, report.nds_lite, epoch
                shutil.copyfile(epoch_path, best_path)

    return TrainResult(
        best_val_map=best_map,
        best_val_nds=best_nds,
        best_epoch=best_epoch,
        best_ckpt=best_path,
        metrics_path=metrics_path,
        records=records,
    )
