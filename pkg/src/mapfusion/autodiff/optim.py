"""AdamW with decoupled weight decay and the one-cycle learning schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mapfusion.autodiff.params import ModelParams


@dataclass
class OptimState:
    """Per-parameter moments plus optimizer hyperparameters."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    max_lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optim_state(
    params: ModelParams,
    max_lr: float = 1e-3,
    weight_decay: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimState:
    state = OptimState(
        max_lr=max_lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps
    )
    for name, p in params.params():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(params: ModelParams, state: OptimState, lr: float) -> None:
    """One update: decoupled decay first, then the bias-corrected step.

    A missing gradient is treated as zero, so with fresh moments and
    weight decay alone every parameter shrinks by exactly (1 - lr * wd).
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    decay = 1.0 - lr * state.weight_decay
    for name, p in params.params():
        m, v = state.m[name], state.v[name]
        if state.weight_decay != 0.0:
            p.data *= decay
        g = p.grad
        m *= b1
        v *= b2
        if g is not None:
            m += (1.0 - b1) * g
            v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def one_cycle_lr(step: int, total_steps: int, max_lr: float) -> float:
    """Linear warm-up from max_lr/10 over the first 40% of steps, then
    cosine decay to max_lr/1000."""
    if total_steps <= 0:
        raise ValueError("one_cycle_lr requires total_steps > 0")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak = 0.4 * total_steps
    lo = max_lr / 10.0
    if step <= peak:
        t = step / peak
        return lo * (1.0 - t) + max_lr * t
    final = max_lr / 1000.0
    s = (step - peak) / (total_steps - peak)
    return final + (max_lr - final) * 0.5 * (1.0 + math.cos(math.pi * s))
