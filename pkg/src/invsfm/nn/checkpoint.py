"""Parameter checkpoint files.

Layout (little-endian)::

    b"IVSF"  uint32 version  uint32 count
    count x { uint32 name_len, name (utf-8),
              uint32 rank, rank x uint32 dims,
              prod(dims) x float32 }
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import IoFailure, MalformedRecord, MissingFile
from .optim import AdamState

MAGIC = b"IVSF"
VERSION = 1


def save_arrays(arrays: dict, path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise IoFailure(f"writing checkpoint {path}: {exc}") from exc


def load_arrays(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise MissingFile(str(path)) from None
    if raw[:4] != MAGIC:
        raise MalformedRecord(path, "byte 0", "not a checkpoint file (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise MalformedRecord(path, f"byte {pos}", "unexpected end of checkpoint")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise MalformedRecord(path, "byte 4", f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = bytes(take(f"<{nlen}s")[0]).decode("utf-8")
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(raw):
            raise MalformedRecord(path, f"byte {pos}", f"entry {name!r} truncated")
        out[name] = np.frombuffer(raw, "<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    if pos != len(raw):
        raise MalformedRecord(path, f"byte {pos}", "trailing bytes after last entry")
    return out


def save_module(module, path) -> None:
    save_arrays(module.state_dict(), path)


def load_module(module, path):
    module.load_state_dict(load_arrays(path))
    return module


def save_adam(state: AdamState, path) -> None:
    arrays = {"__step__": np.array([state.step], np.float32),
              "__hyper__": np.array([state.lr, state.beta1, state.beta2, state.eps], np.float32)}
    for name in state.m:
        arrays[f"m/{name}"] = state.m[name]
        arrays[f"v/{name}"] = state.v[name]
    save_arrays(arrays, path)


def load_adam(path, template: AdamState | None = None) -> AdamState:
    """Restore optimizer state.

    Hyperparameters are stored as float32; pass ``template`` (e.g. built from
    the run config) to resume with the exact double-precision values.
    """
    arrays = load_arrays(path)
    hyper = arrays.pop("__hyper__")
    step = int(arrays.pop("__step__")[0])
    if template is not None:
        state = AdamState(template.lr, template.beta1, template.beta2, template.eps, step)
    else:
        state = AdamState(*(float(h) for h in hyper), step=step)
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        (state.m if kind == "m" else state.v)[name] = arr
    return state
