"""Detection metrics with center-distance matching, plus the ablation
harness that trains fusion variants side by side.

AP is the normalized area of the precision-recall curve clipped to
recall >= 0.1 and precision >= 0.1: precision is sampled at the 90 recall
levels 0.11 .. 1.00 as a step function (the precision at the first ranked
detection whose recall reaches the level), the 0.1 floor is subtracted,
and the mean is divided by 0.9.  True-positive errors (translation,
scale, orientation) come from the 2 m matches; NDS-lite renormalizes the
usual weighted average over just those three error terms:
``(5 * mAP + sum(1 - min(1, err))) / 8``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mapfusion.geometry import Box3D, normalize_angle

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_ERROR_THRESHOLD = 2.0
ATE_NORM = 4.0  # meters; the largest matching threshold bounds the error

# detections: per sample, list of (Box3D, score); truths: per sample, list of Box3D
DetectionSet = list[tuple[Box3D, float]]


@dataclass
class MatchResult:
    tp_flags: list[bool]
    pairs: list[tuple[int, int]]  # (detection index, ground-truth index)


def _bev_dist(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


def match_detections(dets: DetectionSet, gts: list[Box3D], d: float) -> MatchResult:
    """Greedy same-class matching in descending score order.

    Each detection takes the closest unmatched ground truth of its class
    within ``d`` meters BEV center distance; score ties resolve by
    insertion order.
    """
    if d <= 0:
        raise ValueError("matching threshold must be positive")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    taken = [False] * len(gts)
    tp_flags = [False] * len(dets)
    pairs: list[tuple[int, int]] = []
    for i in order:
        box = dets[i][0]
        best_j, best_dist = -1, d
        for j, gt in enumerate(gts):
            if taken[j] or gt.class_id != box.class_id:
                continue
            dist = _bev_dist(box, gt)
            if dist < best_dist:
                best_j, best_dist = j, dist
        if best_j >= 0:
            taken[best_j] = True
            tp_flags[i] = True
            pairs.append((i, best_j))
    return MatchResult(tp_flags, pairs)


def average_precision(
    dets_by_sample: list[DetectionSet],
    gts_by_sample: list[list[Box3D]],
    class_id: int,
    d: float,
) -> float | None:
    """Clipped AP for one (class, threshold); None when the class has no
    ground truths."""
    n_gt = sum(1 for gts in gts_by_sample for g in gts if g.class_id == class_id)
    if n_gt == 0:
        return None
    ranked: list[tuple[float, int, bool]] = []  # (-score, global order, is_tp)
    counter = 0
    for dets, gts in zip(dets_by_sample, gts_by_sample):
        match = match_detections(dets, gts, d)
        for (box, score), tp in zip(dets, match.tp_flags):
            if box.class_id != class_id:
                continue
            ranked.append((-score, counter, tp))
            counter += 1
    ranked.sort()
    if not ranked:
        return 0.0
    tp_cum = 0
    recalls, precisions = [], []
    for k, (_, _, tp) in enumerate(ranked, start=1):
        tp_cum += int(tp)
        recalls.append(tp_cum / n_gt)
        precisions.append(tp_cum / k)
    total = 0.0
    for i in range(11, 101):
        level = i / 100.0
        prec = 0.0
        for rec, p in zip(recalls, precisions):
            if rec >= level:
                prec = p
                break
        total += max(0.0, prec - 0.1)
    return total / (90 * 0.9)


@dataclass
class MetricsReport:
    ap: dict[tuple[int, float], float | None]
    mean_ap: float
    mate: float
    mase: float
    maoe: float
    nds_lite: float
    n_gt: int
    n_det: int
    n_tp_at_2m: int

    def to_json(self, class_names: tuple[str, ...]) -> dict:
        ap = {
            f"{class_names[cid]}@{thr:g}": val
            for (cid, thr), val in sorted(self.ap.items())
        }
        return {
            "AP": ap,
            "mAP": self.mean_ap,
            "mATE": self.mate,
            "mASE": self.mase,
            "mAOE": self.maoe,
            "NDS_lite": self.nds_lite,
            "n_gt": self.n_gt,
            "n_det": self.n_det,
            "n_tp_at_2m": self.n_tp_at_2m,
        }


def _size_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two boxes after aligning centers and yaw."""
    inter = (
        min(a.size[0], b.size[0])
        * min(a.size[1], b.size[1])
        * min(a.size[2], b.size[2])
    )
    va = a.size[0] * a.size[1] * a.size[2]
    vb = b.size[0] * b.size[1] * b.size[2]
    return inter / (va + vb - inter)


def compute_metrics(
    dets_by_sample: list[DetectionSet],
    gts_by_sample: list[list[Box3D]],
    n_classes: int = 3,
    thresholds: tuple[float, ...] = THRESHOLDS,
) -> MetricsReport:
    if len(dets_by_sample) != len(gts_by_sample):
        raise ValueError("detection and ground-truth sample counts differ")
    ap: dict[tuple[int, float], float | None] = {}
    for class_id in range(n_classes):
        for thr in thresholds:
            ap[(class_id, thr)] = average_precision(
                dets_by_sample, gts_by_sample, class_id, thr
            )
    defined = [v for v in ap.values() if v is not None]
    mean_ap = float(np.mean(defined)) if defined else 0.0

    dists, ious, yaw_errs = [], [], []
    for dets, gts in zip(dets_by_sample, gts_by_sample):
        match = match_detections(dets, gts, TP_ERROR_THRESHOLD)
        for i, j in match.pairs:
            box = dets[i][0]
            gt = gts[j]
            dists.append(_bev_dist(box, gt))
            ious.append(_size_iou(box, gt))
            yaw_errs.append(abs(normalize_angle(box.yaw - gt.yaw)))
    n_tp = len(dists)
    # undefined TP errors (no matches) count as worst case 1 after scaling
    mate = float(np.mean(dists)) if n_tp else ATE_NORM
    mase = float(1.0 - np.mean(ious)) if n_tp else 1.0
    maoe = float(np.mean(yaw_errs)) if n_tp else math.pi
    scaled = (mate / ATE_NORM, mase, maoe / math.pi)
    nds = (5.0 * mean_ap + sum(1.0 - min(1.0, e) for e in scaled)) / 8.0
    return MetricsReport(
        ap=ap,
        mean_ap=mean_ap,
        mate=mate,
        mase=mase,
        maoe=maoe,
        nds_lite=nds,
        n_gt=sum(len(g) for g in gts_by_sample),
        n_det=sum(len(d) for d in dets_by_sample),
        n_tp_at_2m=n_tp,
    )


@dataclass
class AblationResult:
    variants: list[str]
    seeds: list[int]
    map_by_variant: dict[str, list[float]] = field(default_factory=dict)
    nds_by_variant: dict[str, list[float]] = field(default_factory=dict)

    def mean_map(self, variant: str) -> float:
        return float(np.mean(self.map_by_variant[variant]))

    def mean_nds(self, variant: str) -> float:
        return float(np.mean(self.nds_by_variant[variant]))

    def to_json(self) -> dict:
        rows = {}
        for v in self.variants:
            maps = self.map_by_variant[v]
            nds = self.nds_by_variant[v]
            rows[v] = {
                "mAP": maps,
                "NDS_lite": nds,
                "mAP_mean": float(np.mean(maps)),
                "mAP_spread": float(np.std(maps)),
                "NDS_mean": float(np.mean(nds)),
                "NDS_spread": float(np.std(nds)),
            }
        deltas = {}
        if "baseline" in self.variants:
            base = self.mean_map("baseline")
            base_nds = self.mean_nds("baseline")
            for v in self.variants:
                deltas[v] = {
                    "mAP_vs_baseline": self.mean_map(v) - base,
                    "NDS_vs_baseline": self.mean_nds(v) - base_nds,
                }
        return {"seeds": self.seeds, "rows": rows, "deltas_vs_baseline": deltas}

    def to_table(self) -> str:
        lines = [
            "| variant | mAP mean | mAP spread | NDS mean | NDS spread | dmAP |",
            "|---|---|---|---|---|---|",
        ]
        base = self.mean_map("baseline") if "baseline" in self.variants else None
        for v in self.variants:
            maps = self.map_by_variant[v]
            nds = self.nds_by_variant[v]
            delta = "" if base is None else f"{self.mean_map(v) - base:+.4f}"
            lines.append(
                f"| {v} | {np.mean(maps):.4f} | {np.std(maps):.4f} "
                f"| {np.mean(nds):.4f} | {np.std(nds):.4f} | {delta} |"
            )
        return "\n".join(lines) + "\n"


def run_ablation(
    data_dir: str | Path,
    out_dir: str | Path,
    seeds: list[int],
    variants: list[str],
    epochs: int = 20,
    max_lr: float = 1e-3,
    augment: bool = True,
) -> AblationResult:
    """Train every (variant, seed) with otherwise identical configs and
    tabulate best-validation mAP / NDS-lite."""
    from mapfusion.model import VARIANTS
    from mapfusion.trainer import TrainConfig, train

    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
    out_root = Path(out_dir)
    result = AblationResult(variants=list(variants), seeds=list(seeds))
    for variant in variants:
        fusion, mapseg = VARIANTS[variant]
        result.map_by_variant[variant] = []
        result.nds_by_variant[variant] = []
        for seed in seeds:
            cfg = TrainConfig(
                data_dir=str(data_dir),
                out_dir=str(out_root / variant / f"seed{seed}"),
                epochs=epochs,
                max_lr=max_lr,
                fusion=fusion.value,
                mapseg=mapseg,
                seed=seed,
                augment=augment,
            )
            res = train(cfg)
            result.map_by_variant[variant].append(res.best_val_map)
            result.nds_by_variant[variant].append(res.best_val_nds)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "ablation.json").write_text(
        json.dumps(result.to_json(), sort_keys=True, indent=2)
    )
    (out_root / "ablation.md").write_text(result.to_table())
    return result
