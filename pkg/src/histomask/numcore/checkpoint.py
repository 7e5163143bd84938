"""Binary checkpoint files for model parameters and optimizer state.

Layout (all integers little-endian):

    magic   4 bytes  b"MHCK"
    version u32      currently 1
    params  u32 count, then per entry:
        name_len u32, name UTF-8, rank u32, extents u64 * rank,
        values f32 * prod(extents)
    optimizer state: same count+entries layout; empty (count 0) when a
    checkpoint carries no optimizer state.

Optimizer entries use reserved names: ``adam.step`` (scalar) and
``adam.m.<param>`` / ``adam.v.<param>`` for the moments.  Values are stored
as f32; parsing and re-serializing a file is byte-exact.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .optim import AdamWState
from .tensor import Tensor

__all__ = [
    "CheckpointError",
    "read_checkpoint",
    "write_checkpoint",
    "params_to_arrays",
    "load_params_into",
    "optimizer_entries",
    "restore_optimizer",
]

MAGIC = b"MHCK"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def _write_entries(fh: BinaryIO, entries: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        blob = name.encode("utf-8")
        arr = np.asarray(arr)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_entries(fh: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, name_len).decode("utf-8")
        if name in entries:
            raise CheckpointError(f"duplicate entry name '{name}'")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        shape = tuple(
            struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank)
        )
        n_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = _read_exact(fh, 4 * n_values)
        entries[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return entries


def write_checkpoint(
    path,
    params: dict[str, np.ndarray],
    optimizer: dict[str, np.ndarray] | None = None,
) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_entries(fh, params)
        _write_entries(fh, optimizer or {})


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Returns (params, optimizer_entries), both as f32 arrays."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        params = _read_entries(fh)
        optimizer = _read_entries(fh)
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
    return params, optimizer


def params_to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in params.items()}


def load_params_into(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into an existing parameter dict (f64 in memory)."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}"
        )
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {arr.shape} vs model {p.data.shape}"
            )
        p.data = arr.astype(np.float64)


def optimizer_entries(state: AdamWState) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {"adam.step": np.asarray(float(state.step))}
    for name, (m, v) in state.moments.items():
        entries[f"adam.m.{name}"] = m
        entries[f"adam.v.{name}"] = v
    return entries


def restore_optimizer(entries: dict[str, np.ndarray], state: AdamWState) -> None:
    if not entries:
        return
    state.step = int(entries["adam.step"])
    for name, arr in entries.items():
        if name.startswith("adam.m."):
            pname = name[len("adam.m."):]
            v = entries.get(f"adam.v.{pname}")
            if v is None:
                raise CheckpointError(f"optimizer entry for '{pname}' missing v moment")
            state.moments[pname] = (
                arr.astype(np.float64),
                v.astype(np.float64),
            )
