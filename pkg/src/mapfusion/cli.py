"""Command-line entry point: dataset generation, map rendering, training,
evaluation, ablation, and static BEV visualization."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from mapfusion import backend

log = logging.getLogger("mapfusion")


@contextmanager
def _output_guard(*paths: Path):
    """Remove listed outputs if the command fails partway."""
    existed = {p: p.exists() for p in paths}
    try:
        yield
    except BaseException:
        for p, was_there in existed.items():
            if was_there or not p.exists():
                continue
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            else:
                p.unlink(missing_ok=True)
        raise


def _cmd_gen_data(args) -> int:
    from mapfusion.scene_gen import SceneSpec, generate_dataset

    fields = {"seed": args.seed}
    if args.spec:
        fields.update(json.loads(Path(args.spec).read_text()))
        fields["seed"] = args.seed if args.seed is not None else fields.get("seed", 0)
    spec = SceneSpec(**fields)
    out = Path(args.out)
    with _output_guard(out):
        index = generate_dataset(spec, args.train, args.val, out)
    n_boxes = 0
    for sid in index.train_ids + index.val_ids:
        n_boxes += len(json.loads((out / "samples" / sid / "boxes.json").read_text()))
    print(
        f"wrote {len(index.train_ids)} train + {len(index.val_ids)} val samples "
        f"({n_boxes} boxes) to {out}"
    )
    return 0


def _cmd_render_map(args) -> int:
    from mapfusion.geometry import Pose2D
    from mapfusion.hdmap import render_ego_raster
    from mapfusion.scene_gen import load_dataset, load_sample
    from mapfusion.viz import render_raster_composite, write_ppm

    index = load_dataset(args.data)
    sample = load_sample(index, args.sample)
    ego = Pose2D(*(float(v) for v in args.ego.split(","))) if args.ego else Pose2D()
    raster = render_ego_raster(sample.map, ego, index.grid)
    out = Path(args.out)
    with _output_guard(out):
        write_ppm(out, render_raster_composite(raster, args.scale))
    print(f"wrote {out}")
    return 0


def _cmd_train(args) -> int:
    from mapfusion.model import VARIANTS
    from mapfusion.trainer import TrainConfig, train

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {
        "data_dir": args.data,
        "out_dir": args.out,
        "epochs": args.epochs,
        "max_lr": args.max_lr,
        "seed": args.seed,
        "lambda_seg": args.lambda_seg,
    }
    if args.no_augment:
        overrides["augment"] = False
    if args.variant:
        fusion, mapseg = VARIANTS[args.variant]
        overrides["fusion"] = fusion.value
        overrides["mapseg"] = mapseg
    base.setdefault("data_dir", args.data)
    base.setdefault("out_dir", args.out)
    cfg = TrainConfig.from_json(base, **overrides)
    if cfg.data_dir is None or cfg.out_dir is None:
        raise SystemExit("train requires --data and --out (or a config providing them)")
    with _output_guard(Path(cfg.out_dir)):
        result = train(cfg)
    print(
        f"best val mAP {result.best_val_map:.4f} (NDS-lite {result.best_val_nds:.4f}) "
        f"at epoch {result.best_epoch}; metrics in {result.metrics_path}"
    )
    return 0


def _cmd_eval(args) -> int:
    from mapfusion.scene_gen import load_dataset
    from mapfusion.trainer import evaluate_params, load_net_checkpoint

    index = load_dataset(args.data)
    params, net_cfg, grid, classes = load_net_checkpoint(args.ckpt)
    if grid != index.grid:
        raise SystemExit(
            f"checkpoint grid {grid} does not match dataset grid {index.grid}"
        )
    ids = index.val_ids if args.split == "val" else index.train_ids
    report = evaluate_params(
        params, net_cfg, index, ids, args.score_threshold, args.max_dets
    )
    out = Path(args.out)
    with _output_guard(out):
        out.write_text(json.dumps(report.to_json(classes), sort_keys=True, indent=2))
    print(f"mAP {report.mean_ap:.4f}  NDS-lite {report.nds_lite:.4f}  -> {out}")
    return 0


def _cmd_ablate(args) -> int:
    from mapfusion.evaluator import run_ablation

    seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",")
    out = Path(args.out)
    with _output_guard(out):
        result = run_ablation(
            args.data, out, seeds, variants, epochs=args.epochs, max_lr=args.max_lr
        )
    print(result.to_table())
    return 0


def _cmd_viz(args) -> int:
    from mapfusion.geometry import Pose2D
    from mapfusion.hdmap import render_ego_raster
    from mapfusion.scene_gen import load_dataset, load_sample
    from mapfusion.viz import render_scene, render_seg_panel, write_ppm

    index = load_dataset(args.data)
    sample = load_sample(index, args.sample)
    raster = render_ego_raster(sample.map, Pose2D(), index.grid)
    detections = None
    seg_prob = None
    if args.ckpt:
        from mapfusion.model import FusionMode, forward
        from mapfusion.pillar_encoder import pillarize
        from mapfusion.trainer import infer_sample, load_net_checkpoint

        params, net_cfg, grid, _ = load_net_checkpoint(args.ckpt)
        detections = infer_sample(
            params, net_cfg, sample, grid, args.score_threshold, args.max_dets
        )
        if net_cfg.mapseg:
            raw = pillarize(sample.points, grid)
            fwd_raster = (
                raster.as_float()
                if net_cfg.fusion != FusionMode.BASELINE_NO_MAP
                else None
            )
            out_t = forward(
                params, net_cfg, raw, fwd_raster, training=False, want_seg=True
            )
            z = out_t.seg_logits.data
            seg_prob = 1.0 / (1.0 + np.exp(-z.astype(np.float64)))
    out = Path(args.out)
    outputs = [out]
    seg_path = out.with_name(out.stem + "_seg" + out.suffix)
    if seg_prob is not None:
        outputs.append(seg_path)
    with _output_guard(*outputs):
        write_ppm(out, render_scene(sample, raster, args.scale, detections))
        if seg_prob is not None:
            write_ppm(seg_path, render_seg_panel(seg_prob, args.scale))
    print(f"wrote {out}" + (f" and {seg_path}" if seg_prob is not None else ""))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mapfusion",
        description="Map-fused BEV lidar detection on synthetic scenes",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="cap kernel worker threads (falls back to MAPFUSION_THREADS)",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=512)
    p.add_argument("--val", type=int, default=128)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON file with SceneSpec field overrides")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("render-map", help="render a sample's map raster to PPM")
    p.add_argument("--data", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--ego", help="ego pose as 'x,y,yaw'")
    p.set_defaults(func=_cmd_render_map)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--config", help="TrainConfig JSON file; flags override")
    p.add_argument("--variant", choices=["baseline", "mapseg", "featureagg", "full"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-lr", dest="max_lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-seg", dest="lambda_seg", type=float)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["val", "train"], default="val")
    p.add_argument("--score-threshold", type=float, default=0.1)
    p.add_argument("--max-dets", type=int, default=100)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and compare fusion variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument(
        "--variants",
        default="baseline,mapseg,featureagg-simple,featureagg-v1,featureagg-v2,full",
    )
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--max-lr", dest="max_lr", type=float, default=1e-3)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("viz", help="render a BEV composite image")
    p.add_argument("--data", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="draw predictions (and a seg panel if present)")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--score-threshold", type=float, default=0.3)
    p.add_argument("--max-dets", type=int, default=100)
    p.set_defaults(func=_cmd_viz)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
        datefmt="%H:%M:%S",
    )
    if args.verbose:
        logging.getLogger("mapfusion").setLevel(logging.INFO)
        logging.getLogger("mapfusion.trainer").setLevel(logging.INFO)
    backend.set_threads(args.threads)
    from mapfusion.trainer import TrainingDivergedError

    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, TrainingDivergedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
