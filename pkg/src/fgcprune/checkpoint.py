"""Versioned binary checkpoints.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
a UTF-8 JSON header (config, epoch, RNG state, array directory), then the
arrays as raw little-endian float64 in directory order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"FGCCKPT\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    config_hash: str
    epoch: int
    rng_state: dict
    arrays: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def equals(self, other: "Checkpoint") -> bool:
        """Bit-exact comparison of every array plus epoch and RNG state."""
        if self.arrays.keys() != other.arrays.keys():
            return False
        if self.epoch != other.epoch or self.rng_state != other.rng_state:
            return False
        return all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    directory = []
    payload = []
    offset = 0
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({
        "version": ckpt.version,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "arrays": directory,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", ckpt.version, len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    body = memoryview(blob)[20 + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(body):
            raise DataFormatError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(body[start:end], dtype="<f8").reshape(tuple(entry["shape"])).copy()
    return Checkpoint(header["config"], header["config_hash"], header["epoch"],
                      header["rng_state"], arrays, version)
