"""Differentiable operations: convolution, batchnorm, activations,
channel concat, and the detection/segmentation losses."""

from __future__ import annotations

import contextlib

import numpy as np

from mapfusion.kernels import conv as conv_kernels
from mapfusion.autodiff.tensor import Tensor, as_array, make_op


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate (C_in, H, W) with (C_out, C_in, k, k), k in {1, 3}."""
    if stride != 1:
        raise NotImplementedError("conv2d supports stride 1 only")
    if x.data.ndim != 3:
        raise ValueError(f"conv2d input must be 3D (C, H, W), got shape {x.shape}")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d kernel must be (C_out, C_in, k, k), got shape {w.shape}")
    k = w.shape[2]
    if k not in (1, 3):
        raise ValueError(f"conv2d kernel size must be 1 or 3, got {k}")
    if w.shape[1] != x.shape[0]:
        raise ValueError(
            f"conv2d kernel expects {w.shape[1]} input channels, input has {x.shape[0]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"conv2d bias shape {b.shape} != ({w.shape[0]},)")

    need_grad = x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    out, ctx = conv_kernels.forward(
        x.data, w.data, None if b is None else b.data, padding, keep_ctx=need_grad
    )
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        dx = dw = db = None
        if x.requires_grad:
            dx = conv_kernels.backward_input(w.data, g, padding, x.data.shape)
        if w.requires_grad:
            dw = conv_kernels.backward_weight(x.data, ctx, g, w.data.shape, padding)
        if b is not None and b.requires_grad:
            db = conv_kernels.backward_bias(g)
        return (dx, dw) if b is None else (dx, dw, db)

    return make_op(out, parents, backward)


def batchnorm2d(
    x: Tensor,
    gain: Tensor,
    offset: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W) of an (N, C, H, W) input.

    Train mode normalizes with the biased batch variance and folds the
    unbiased variance into the running buffers (in place); eval mode reads
    the buffers.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm2d input must be 4D (N, C, H, W), got {x.shape}")
    n_batch, channels = x.shape[0], x.shape[1]
    if gain.shape != (channels,) or offset.shape != (channels,):
        raise ValueError("batchnorm2d gain/offset must be shape (C,)")
    axes = (0, 2, 3)
    n = x.data.size // channels
    cshape = (1, channels, 1, 1)

    if training:
        if n < 2:
            raise ValueError("batchnorm2d train mode requires N*H*W >= 2 per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mu = running_mean
        inv_std = 1.0 / np.sqrt(running_var + eps)
    # fold normalize + affine into one fused multiply-add pass
    scale = (gain.data * inv_std).reshape(cshape)
    shift = (offset.data - gain.data * mu * inv_std).reshape(cshape)
    out = x.data * scale + shift

    def backward(g):
        xhat = None
        if gain.requires_grad or (x.requires_grad and training):
            xhat = (x.data - mu.reshape(cshape)) * inv_std.reshape(cshape)
        dgain = (g * xhat).sum(axis=axes) if gain.requires_grad else None
        doffset = g.sum(axis=axes) if offset.requires_grad else None
        dx = None
        if x.requires_grad:
            gscaled = g * gain.data.reshape(cshape)
            if training:
                m1 = gscaled.mean(axis=axes).reshape(cshape)
                m2 = (gscaled * xhat).mean(axis=axes).reshape(cshape)
                dx = inv_std.reshape(cshape) * (gscaled - m1 - xhat * m2)
            else:
                dx = gscaled * inv_std.reshape(cshape)
        return dx, dgain, doffset

    return make_op(out, (x, gain, offset), backward)


_relu_trace: list | None = None


@contextlib.contextmanager
def relu_kink_trace():
    """Collect, per relu call, the minimum |preactivation| seen.

    Finite-difference checks reject samples whose activations sit close to
    the relu kink; this hook exposes the margins.
    """
    global _relu_trace
    prev = _relu_trace
    _relu_trace = []
    try:
        yield _relu_trace
    finally:
        _relu_trace = prev


def relu(x: Tensor) -> Tensor:
    if _relu_trace is not None and x.data.size:
        _relu_trace.append(float(np.min(np.abs(x.data))))
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (np.where(x.data > 0.0, g, 0.0),)

    return make_op(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return make_op(y, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack (C1, H, W) and (C2, H, W) into (C1+C2, H, W)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ValueError("concat_channels operands must be 3D (C, H, W)")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(
            f"concat_channels spatial mismatch: first {a.shape[1:]}, second {b.shape[1:]}"
        )
    ca = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def backward(g):
        return g[:ca], g[ca:]

    return make_op(out, (a, b), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return make_op(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        return g, g.copy()

    return make_op(out, (a, b), backward)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    out = x.data * c

    def backward(g):
        return (g * c,)

    return make_op(out, (x,), backward)


def bce_with_logits(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Numerically stable binary cross-entropy on logits.

    ``targets`` is a constant array with values in [0, 1].  Loss scalars
    are accumulated in float64 whatever the network dtype; gradients come
    back in the logits' dtype.
    """
    t = as_array(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"bce_with_logits shape mismatch: {logits.shape} vs {t.shape}")
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError("bce_with_logits targets must lie in [0, 1]")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    z = logits.data.astype(np.float64)
    # max(z,0) - z*t + log(1 + exp(-|z|))
    per_elem = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    denom = per_elem.size if reduction == "mean" else 1
    loss = per_elem.sum() / denom

    def backward(g):
        return ((g * (_stable_sigmoid(z) - t) / denom).astype(logits.dtype),)

    return make_op(np.asarray(loss, dtype=np.float64), (logits,), backward)


def penalty_reduced_focal(heatmap_logits: Tensor, target_heatmap) -> Tensor:
    """Center-heatmap focal loss, alpha=2, beta=4, normalized by positives.

    Cells where the target equals 1 are positives; elsewhere the standard
    penalty reduction (1 - t)^4 applies.  The positive count is floored at
    one.
    """
    t = as_array(target_heatmap, dtype=np.float64)
    if t.shape != heatmap_logits.shape:
        raise ValueError(
            f"focal shape mismatch: {heatmap_logits.shape} vs {t.shape}"
        )
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError("focal target heatmap must lie in [0, 1]")
    z = heatmap_logits.data.astype(np.float64)
    p = _stable_sigmoid(z)
    q = _stable_sigmoid(-z)  # 1 - p, computed without cancellation
    log_p = -_softplus(-z)
    log_q = -_softplus(z)
    pos = t >= 1.0
    n_pos = max(1, int(pos.sum()))
    w4 = (1.0 - t) ** 4
    pos_term = (q * q * log_p)[pos].sum()
    neg_term = (w4 * p * p * log_q)[~pos].sum()
    loss = -(pos_term + neg_term) / n_pos

    def backward(g):
        dz = np.where(
            pos,
            2.0 * p * q * q * log_p - q**3,
            w4 * (p**3 - 2.0 * p * p * q * log_q),
        )
        return ((g * dz / n_pos).astype(heatmap_logits.dtype),)

    return make_op(np.asarray(loss, dtype=np.float64), (heatmap_logits,), backward)


def l1_masked(pred: Tensor, target, mask) -> Tensor:
    """Mean absolute error over mask-positive cells; 0 for an empty mask.

    ``mask`` is (H, W) and broadcasts over the channel axis; the mean runs
    over (channel, masked-cell) pairs.
    """
    t = as_array(target, dtype=np.float64)
    m = as_array(mask, dtype=np.float64)
    if t.shape != pred.shape:
        raise ValueError(f"l1_masked shape mismatch: {pred.shape} vs {t.shape}")
    if m.shape != pred.shape[-2:]:
        raise ValueError(f"l1_masked mask shape {m.shape} != {pred.shape[-2:]}")
    mb = (m > 0).astype(np.float64)
    count = float(mb.sum()) * (pred.data.size // m.size)
    diff = pred.data.astype(np.float64) - t
    if count == 0:
        loss = np.asarray(0.0)
    else:
        loss = np.asarray((np.abs(diff) * mb).sum() / count)

    def backward(g):
        if count == 0:
            return (np.zeros_like(pred.data),)
        return ((g * np.sign(diff) * mb / count).astype(pred.dtype),)

    return make_op(loss, (pred,), backward)
