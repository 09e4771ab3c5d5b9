"""Dense 2D cross-correlation, stride 1, with gradients.

numpy path: im2col (nine block copies into a scratch matrix) plus a BLAS
matmul.  numba path: direct loop kernels, parallel over output channels so
every thread owns its output slice and results are thread-count invariant.
1x1 kernels are plain channel matmuls in both paths.

The input gradient reuses the forward kernel: correlate the output
gradient, padded by ``k - 1 - padding``, with the channel-transposed,
spatially flipped weights.
"""

from __future__ import annotations

import numpy as np

from mapfusion import backend


def _im2col(xp: np.ndarray, k: int, h_out: int, w_out: int) -> np.ndarray:
    c_in = xp.shape[0]
    col = np.empty((c_in * k * k, h_out * w_out), xp.dtype)
    view = col.reshape(c_in, k, k, h_out, w_out)
    for ky in range(k):
        for kx in range(k):
            np.copyto(view[:, ky, kx], xp[:, ky : ky + h_out, kx : kx + w_out])
    return col


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def _forward_blas(x, w, b, padding, keep_ctx):
    c_out, c_in, k, _ = w.shape
    h_out = x.shape[1] + 2 * padding - k + 1
    w_out = x.shape[2] + 2 * padding - k + 1
    if k == 1 and padding == 0:
        out = w.reshape(c_out, c_in) @ x.reshape(c_in, -1)
        ctx = None
    else:
        col = _im2col(_pad(x, padding), k, h_out, w_out)
        out = w.reshape(c_out, -1) @ col
        ctx = col if keep_ctx else None
    if b is not None:
        out += b[:, None]
    return out.reshape(c_out, h_out, w_out), ctx


_numba_kernels = None


def _get_numba_kernels():
    global _numba_kernels
    if _numba_kernels is None:
        from numba import njit, prange

        @njit(parallel=True, fastmath=True, cache=True)
        def fwd(xp, w, b, out):  # pragma: no cover - jitted
            c_out, c_in, k, _ = w.shape
            _, h, wd = out.shape
            for co in prange(c_out):
                for y in range(h):
                    for x in range(wd):
                        out[co, y, x] = b[co]
                for ci in range(c_in):
                    for ky in range(k):
                        for kx in range(k):
                            wv = w[co, ci, ky, kx]
                            for y in range(h):
                                orow = out[co, y]
                                irow = xp[ci, y + ky]
                                for x in range(wd):
                                    orow[x] += wv * irow[x + kx]

        @njit(parallel=True, fastmath=True, cache=True)
        def dweight(xp, dout, dw):  # pragma: no cover - jitted
            c_out, c_in, k, _ = dw.shape
            _, h, wd = dout.shape
            for co in prange(c_out):
                for ci in range(c_in):
                    for ky in range(k):
                        for kx in range(k):
                            acc = 0.0
                            for y in range(h):
                                drow = dout[co, y]
                                irow = xp[ci, y + ky]
                                for x in range(wd):
                                    acc += drow[x] * irow[x + kx]
                            dw[co, ci, ky, kx] = acc

        _numba_kernels = (fwd, dweight)
    return _numba_kernels


def _forward_numba(x, w, b, padding):
    c_out, c_in, k, _ = w.shape
    if k == 1 and padding == 0:
        out = w.reshape(c_out, c_in) @ x.reshape(c_in, -1)
        if b is not None:
            out += b[:, None]
        return out.reshape(c_out, x.shape[1], x.shape[2])
    fwd, _ = _get_numba_kernels()
    xp = _pad(x, padding)
    h_out = x.shape[1] + 2 * padding - k + 1
    w_out = x.shape[2] + 2 * padding - k + 1
    out = np.empty((c_out, h_out, w_out), x.dtype)
    bias = b if b is not None else np.zeros(c_out, x.dtype)
    fwd(xp, w, bias, out)
    return out


def forward(x, w, b, padding, keep_ctx=False):
    """Returns (out, ctx); ctx feeds backward_weight when kept."""
    if backend.conv_backend() == "numba":
        return _forward_numba(x, w, b, padding), None
    return _forward_blas(x, w, b, padding, keep_ctx)


def backward_weight(x, ctx, dout, w_shape, padding):
    c_out, c_in, k, _ = w_shape
    dout_flat = dout.reshape(c_out, -1)
    if k == 1 and padding == 0:
        dw = dout_flat @ x.reshape(c_in, -1).T
        return dw.reshape(w_shape)
    if backend.conv_backend() == "numba":
        _, dweight = _get_numba_kernels()
        dw = np.empty(w_shape, x.dtype)
        dweight(_pad(x, padding), dout, dw)
        return dw
    if ctx is None:
        ctx = _im2col(_pad(x, padding), k, dout.shape[1], dout.shape[2])
    return (dout_flat @ ctx.T).reshape(w_shape)


def backward_input(w, dout, padding, x_shape):
    c_out, c_in, k, _ = w.shape
    if k == 1 and padding == 0:
        dx = w.reshape(c_out, c_in).T @ dout.reshape(c_out, -1)
        return dx.reshape(x_shape)
    pad_b = k - 1 - padding
    if pad_b < 0:
        raise ValueError(f"padding {padding} exceeds kernel reach for k={k}")
    w_flip = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    dx, _ = forward(dout, w_flip, None, pad_b)
    if dx.shape != x_shape:
        raise AssertionError(f"input gradient shape {dx.shape} != {x_shape}")
    return dx


def backward_bias(dout):
    return dout.sum(axis=(1, 2))
