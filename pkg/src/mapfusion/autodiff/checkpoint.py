"""Checkpoint file format.

Layout: magic bytes ``MFCKPT1\\n``, an 8-byte little-endian unsigned
manifest length, a JSON manifest, then a raw little-endian float32 payload
in manifest order.  The manifest lists name, kind, shape, dtype, and byte
offset per tensor, carries the optimizer-state presence flag, and may
embed an arbitrary JSON config blob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from mapfusion.autodiff.params import ModelParams

MAGIC = b"MFCKPT1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Decoded checkpoint: arrays by name, split by kind."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    optim_m: dict[str, np.ndarray] = field(default_factory=dict)
    optim_v: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int | None = None
    has_optimizer_state: bool = False
    config: dict | None = None


def save_checkpoint(
    path: str,
    params: ModelParams,
    config: dict | None = None,
    optim_state=None,
) -> None:
    entries = []
    chunks: list[bytes] = []
    offset = 0

    def put(name: str, kind: str, arr: np.ndarray):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append(
            {
                "name": name,
                "kind": kind,
                "shape": list(arr.shape),
                "dtype": "f32",
                "offset": offset,
            }
        )
        raw = data.tobytes()
        chunks.append(raw)
        offset += len(raw)

    for name, p in params.params():
        put(name, "param", p.data)
    for name, b in params.buffers():
        put(name, "buffer", b)
    if optim_state is not None:
        for name in optim_state.m:
            put(name, "optim_m", optim_state.m[name])
        for name in optim_state.v:
            put(name, "optim_v", optim_state.v[name])

    manifest = {
        "tensors": entries,
        "has_optimizer_state": optim_state is not None,
        "optimizer_step": None if optim_state is None else optim_state.step,
        "config": config,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for raw in chunks:
            f.write(raw)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic bytes)")
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: truncated header")
    (mlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    mstart = len(MAGIC) + 8
    if mstart + mlen > len(blob):
        raise CheckpointError(f"{path}: manifest length exceeds file size")
    try:
        manifest = json.loads(blob[mstart : mstart + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed manifest: {e}") from e
    payload = blob[mstart + mlen :]

    ckpt = Checkpoint(
        has_optimizer_state=bool(manifest.get("has_optimizer_state")),
        optimizer_step=manifest.get("optimizer_step"),
        config=manifest.get("config"),
    )
    sink = {
        "param": ckpt.params,
        "buffer": ckpt.buffers,
        "optim_m": ckpt.optim_m,
        "optim_v": ckpt.optim_v,
    }
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(
                f"{path}: tensor {e['name']!r} payload out of bounds"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        arr = arr.reshape(shape).astype(np.float32)
        try:
            sink[e["kind"]][e["name"]] = arr
        except KeyError:
            raise CheckpointError(
                f"{path}: unknown tensor kind {e['kind']!r}"
            ) from None
    return ckpt


def restore_params(params: ModelParams, ckpt: Checkpoint, path: str = "<ckpt>") -> None:
    """Copy checkpoint arrays into a freshly built ModelParams.

    The name sets must match exactly; the error lists every missing and
    unexpected name.
    """
    want = set(params.names())
    have = set(ckpt.params) | set(ckpt.buffers)
    if want != have:
        missing = sorted(want - have)
        extra = sorted(have - want)
        raise CheckpointError(
            f"{path}: manifest mismatch; missing={missing} unexpected={extra}"
        )
    for name, p in params.params():
        src = ckpt.params[name]
        if src.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: {src.shape} vs {p.data.shape}"
            )
        p.data[...] = src.astype(p.data.dtype)
    for name, b in params.buffers():
        b[...] = ckpt.buffers[name].astype(b.dtype)
