"""Versioned binary container for model parameters.

Layout: 8-byte magic, u32 version, u32 length-prefixed JSON header (kind tag
plus a config echo), u32 tensor count, then each tensor as u32 ndim,
u64 dims, and float64 data. All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MSVRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of a supported version."""


def write_checkpoint(path, kind: str, config: dict, tensors) -> None:
    header = json.dumps({"kind": kind, "config": config}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        arrays = [np.asarray(t, dtype=np.float64) for t in tensors]
        f.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def read_checkpoint(path):
    """Return (kind, config, list of float64 arrays)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise CheckpointError(f"{path}: truncated tensor data")
            arrays.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
    return header["kind"], header["config"], arrays
