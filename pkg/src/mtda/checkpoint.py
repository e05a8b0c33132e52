"""Checkpoint container.

Layout::

    b"MTDACKPT"  | uint32 version | uint64 header length | JSON header | raw tensor bytes

The header holds the run config and, per tensor, its name, dtype, shape and
byte offset. Tensors are stored little-endian and row-major, in model order,
so saving a loaded checkpoint reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MTDACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: dict, state: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in state.items():
        a = np.asarray(arr)
        a = np.array(a, dtype=a.dtype.newbyteorder("<"), order="C")
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", buf, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(buf[start : start + hlen])
    base = start + hlen
    state = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=base + e["offset"]).reshape(e["shape"])
        state[e["name"]] = arr.copy()
    return header["config"], state
