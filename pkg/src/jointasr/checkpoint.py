"""Versioned binary checkpoint container.

Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON header,
then raw little-endian float64 blobs in header order. The header carries the
config echo, tensor names/shapes/offsets and the JSON-able part of the train
state; arrays (parameters, optimizer moments) live in the blob section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"JASRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, config: dict, arrays: dict[str, np.ndarray], state: dict) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, a in arrays.items():
        a = np.asarray(a, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        blobs.append(a.tobytes())
    header = json.dumps({"config": config, "tensors": entries, "state": state}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path: str | Path, expect_config: dict | None = None):
    """Returns (config, arrays, state); raises CheckpointError on format or config mismatch."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode())
    data = np.frombuffer(raw[20 + hlen:], dtype="<f8")
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = data[e["offset"]:e["offset"] + n].reshape(tuple(e["shape"])).astype(np.float64)
    if expect_config is not None and header["config"] != json.loads(json.dumps(expect_config, sort_keys=True)):
        raise CheckpointError(f"{path}: checkpoint config does not match the requested model config")
    return header["config"], arrays, header["state"]
