"""Versioned binary checkpoints.

Layout: magic bytes, format version, a length-prefixed JSON header (model
hyperparameters plus free-form extras such as optimizer step and RNG
state), then named parameter entries: name length, utf-8 name, shape rank,
dims, and raw little-endian values.  Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"BCPT"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(
    path: str | Path,
    params: dict[str, Tensor | np.ndarray],
    hyper: dict,
    extra: dict | None = None,
    dtype: str = "float32",
) -> None:
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype!r}")
    np_dtype = np.dtype(_DTYPES[dtype])
    header = json.dumps(
        {"hyper": hyper, "extra": extra or {}, "dtype": dtype}, sort_keys=True
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", len(params)))
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            if arr.dtype != np_dtype.newbyteorder("="):
                arr = arr.astype(np_dtype)
            raw = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (named arrays, header dict with 'hyper', 'extra', 'dtype')."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        np_dtype = np.dtype(_DTYPES[header["dtype"]])
        (count,) = struct.unpack("<Q", fh.read(8))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            n_items = int(np.prod(shape)) if shape else 1
            raw = fh.read(n_items * np_dtype.itemsize)
            params[name] = np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after last entry")
    return params, header


def restore_into(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing parameter tree, name for name."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)[:4]}, "
                              f"unexpected {sorted(extra)[:4]}")
    for name, tensor in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(f"{name}: shape {arr.shape} != {tensor.shape}")
        tensor.data = arr.astype(tensor.data.dtype, copy=True)
