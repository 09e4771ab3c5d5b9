#!/usr/bin/env python3
"""Benchmark the numba and numpy backends on the hot kernels.

Covers the convolution layer shapes used by the network, polygon
rasterization on generated scenes, and one full training step per fusion
variant.  The MAPFUSION_BACKEND flag is read per call, so both backends
run in one process.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import os
import time

import numpy as np


def timeit(fn, repeats):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_conv(repeats):
    from mapfusion.kernels import conv

    shapes = [(3, 16), (16, 16), (16, 32), (32, 32), (32, 64), (64, 64), (96, 64)]
    rng = np.random.default_rng(0)
    print("\nconv2d 3x3 stride 1 at 128x128 (fwd / dW / dX, ms)")
    print(f"{'shape':>10s} {'numpy':>22s} {'numba':>22s}")
    for c_in, c_out in shapes:
        x = rng.standard_normal((c_in, 128, 128)).astype(np.float32)
        w = rng.standard_normal((c_out, c_in, 3, 3)).astype(np.float32)
        b = np.zeros(c_out, np.float32)
        dout = rng.standard_normal((c_out, 128, 128)).astype(np.float32)
        row = f"{c_in:3d}->{c_out:3d}"
        cells = []
        for backend_name in ("numpy", "numba"):
            os.environ["MAPFUSION_BACKEND"] = backend_name
            t_f = timeit(lambda: conv.forward(x, w, b, 1), repeats)
            t_w = timeit(
                lambda: conv.backward_weight(x, None, dout, w.shape, 1), repeats
            )
            t_x = timeit(lambda: conv.backward_input(w, dout, 1, x.shape), repeats)
            cells.append(f"{t_f*1e3:6.1f}/{t_w*1e3:6.1f}/{t_x*1e3:6.1f}")
        print(f"{row:>10s} {cells[0]:>22s} {cells[1]:>22s}")


def bench_raster(repeats):
    from mapfusion.geometry import GridConfig, Pose2D
    from mapfusion.hdmap import render_ego_raster
    from mapfusion.scene_gen import SceneSpec, generate_scene

    grid = GridConfig()
    sample = generate_scene(SceneSpec(seed=0), 0)
    print("\nego raster render, 4 polygons, 3 channels at 128x128 (ms)")
    for backend_name in ("numpy", "numba"):
        os.environ["MAPFUSION_BACKEND"] = backend_name
        t = timeit(lambda: render_ego_raster(sample.map, Pose2D(), grid), repeats * 4)
        print(f"  {backend_name:6s} {t*1e3:7.2f}")


def bench_train_step(repeats):
    from mapfusion.autodiff import adamw_step, init_optim_state
    from mapfusion.geometry import GridConfig, Pose2D
    from mapfusion.hdmap import render_ego_raster
    from mapfusion.model import (
        FusionMode,
        NetConfig,
        build_params,
        encode_targets,
        forward,
        total_loss,
    )
    from mapfusion.pillar_encoder import pillarize
    from mapfusion.scene_gen import SceneSpec, generate_scene

    grid = GridConfig()
    sample = generate_scene(SceneSpec(seed=0), 0)
    raster = render_ego_raster(sample.map, Pose2D(), grid).as_float()
    raw = pillarize(sample.points, grid)
    targets = encode_targets(sample.boxes, grid, 3)
    variants = [
        ("baseline", FusionMode.BASELINE_NO_MAP, False),
        ("mapseg", FusionMode.BASELINE_NO_MAP, True),
        ("featureagg", FusionMode.DEEP_CONCAT_V2, False),
        ("full", FusionMode.DEEP_CONCAT_V2, True),
    ]
    print("\nfull training step: forward + losses + backward + AdamW (ms)")
    print(f"{'variant':>12s} {'numpy':>9s} {'numba':>9s}")
    for name, fusion, mapseg in variants:
        cfg = NetConfig(fusion=fusion, mapseg=mapseg)
        cells = []
        for backend_name in ("numpy", "numba"):
            os.environ["MAPFUSION_BACKEND"] = backend_name
            params = build_params(cfg, 0)
            optim = init_optim_state(params)

            def step():
                use_raster = raster if fusion != FusionMode.BASELINE_NO_MAP else None
                out = forward(params, cfg, raw, use_raster, training=True, want_seg=mapseg)
                loss, _ = total_loss(out, targets, raster if mapseg else None, 1.0)
                params.zero_grad()
                loss.backward()
                adamw_step(params, optim, 1e-9)

            cells.append(timeit(step, repeats))
        print(f"{name:>12s} {cells[0]*1e3:8.1f} {cells[1]*1e3:8.1f}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    prior = os.environ.get("MAPFUSION_BACKEND")
    try:
        bench_conv(args.repeats)
        bench_raster(args.repeats)
        bench_train_step(args.repeats)
    finally:
        if prior is None:
            os.environ.pop("MAPFUSION_BACKEND", None)
        else:
            os.environ["MAPFUSION_BACKEND"] = prior


if __name__ == "__main__":
    main()
