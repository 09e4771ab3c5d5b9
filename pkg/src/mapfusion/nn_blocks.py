"""Conv block construction shared by the network branches.

A block is conv (k in {1, 3}, stride 1, size-preserving padding) followed
optionally by batchnorm and relu.  Parameters register under
``<prefix>.conv.*`` / ``<prefix>.bn.*`` and initialization is a pure
function of (seed, parameter name), so identical names yield identical
tensors across architecture variants.
"""

from __future__ import annotations

import numpy as np

from mapfusion.autodiff import ModelParams, Tensor, batchnorm2d, conv2d, relu, reshape


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def init_rng(seed: int, name: str) -> np.random.Generator:
    """Philox stream keyed by (seed, fnv1a64(name))."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, fnv1a64(name)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_conv_block(
    params: ModelParams,
    prefix: str,
    c_in: int,
    c_out: int,
    k: int,
    seed: int,
    dtype=np.float32,
    bn: bool = True,
) -> None:
    name = f"{prefix}.conv.w"
    params.add_param(
        name, kaiming_uniform(init_rng(seed, name), (c_out, c_in, k, k), c_in * k * k, dtype)
    )
    if bn:
        # a conv bias feeding batchnorm is absorbed by the mean subtraction,
        # so bn blocks go biasless; the bn offset plays that role
        params.add_param(f"{prefix}.bn.gain", np.ones(c_out, dtype))
        params.add_param(f"{prefix}.bn.offset", np.zeros(c_out, dtype))
        params.add_buffer(f"{prefix}.bn.mean", np.zeros(c_out, dtype))
        params.add_buffer(f"{prefix}.bn.var", np.ones(c_out, dtype))
    else:
        params.add_param(f"{prefix}.conv.b", np.zeros(c_out, dtype))


def apply_conv_block(
    x: Tensor,
    params: ModelParams,
    prefix: str,
    training: bool,
    bn: bool = True,
    act: bool = True,
) -> Tensor:
    w = params.param(f"{prefix}.conv.w")
    k = w.shape[2]
    bias = None if bn else params.param(f"{prefix}.conv.b")
    out = conv2d(x, w, bias, padding=k // 2)
    if bn:
        c, h, wd = out.shape
        out = batchnorm2d(
            reshape(out, (1, c, h, wd)),
            params.param(f"{prefix}.bn.gain"),
            params.param(f"{prefix}.bn.offset"),
            params.buffer(f"{prefix}.bn.mean"),
            params.buffer(f"{prefix}.bn.var"),
            training=training,
        )
        out = reshape(out, (c, h, wd))
    if act:
        out = relu(out)
    return out
