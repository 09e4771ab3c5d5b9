"""Central finite-difference verification of the reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mapfusion.autodiff.tensor import Tensor


def grad_check(
    loss_fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between reverse-mode and central differences.

    ``loss_fn`` rebuilds the scalar loss from the leaves' current data on
    every call.  All coordinates are checked unless
    ``max_coords_per_tensor`` caps them, in which case a deterministic
    sample is drawn from ``rng``.  The relative error uses a denominator
    floor of 1e-6 so coordinates whose true gradient is zero compare by
    absolute error.  Run in 64-bit: float32 rounding swamps eps**2.
    """
    for t in leaves:
        t.grad = None
    out = loss_fn()
    out.backward()
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves
    ]

    max_rel = 0.0
    for t, ana in zip(leaves, analytic):
        n = t.data.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            idxs = range(n)
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn().data)
            flat[i] = orig - eps
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(ana_flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            if rel > max_rel:
                max_rel = rel
    return max_rel
