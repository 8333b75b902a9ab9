"""Checkpoint files: a key-value text manifest plus float32 parameter blobs.

Blob file layout (all integers little-endian uint32)::

    b"CMCB"  version  count
    repeated count times:
        name_len  name(utf-8)  ndim  dim_0 .. dim_{ndim-1}  float32 LE data

Integer buffers (BatchNorm batch counters) are stored as float32, which is
exact below 2**24.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CMCB"
VERSION = 1


class CheckpointError(RuntimeError):
    """A checkpoint is missing, malformed or incompatible."""


def write_blobs(path, arrays: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            if torch.is_tensor(arr):
                arr = arr.detach().cpu().numpy()
            a = np.asarray(arr)
            if a.dtype.kind == "f" and a.dtype != np.float32:
                raise CheckpointError(f"{name}: only float32 arrays are stored losslessly, got {a.dtype}")
            a = np.asarray(a, dtype="<f4")  # tobytes() below emits C order
            key = name.encode()
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def read_blobs(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint file not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a parameter blob file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported blob version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + n].decode()
            off += n
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path} is truncated or corrupt") from exc
    return out


def state_dict_to_arrays(sd: dict, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy() for k, v in sd.items()}


def arrays_to_state_dict(arrays: dict, reference: dict, prefix: str = "") -> dict:
    """Restore a state dict, casting back to the reference tensors' dtypes."""
    out = {}
    for k, ref in reference.items():
        key = prefix + k
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{key}: shape {tuple(arr.shape)} != expected {tuple(ref.shape)}")
        out[k] = torch.from_numpy(arr.copy()).to(ref.dtype)
    return out


def write_manifest(path, items: dict) -> None:
    lines = [f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint manifest not found: {path}")
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}: malformed manifest line {line!r}")
        out[key.strip()] = value.strip()
    return out


def manifest_diff(expected: dict, found: dict) -> list[str]:
    """Human-readable differences for keys present in ``expected``."""
    diffs = []
    for k, v in expected.items():
        if k not in found:
            diffs.append(f"{k}: config={v} checkpoint=<missing>")
        elif str(found[k]) != str(v):
            diffs.append(f"{k}: config={v} checkpoint={found[k]}")
    return diffs
