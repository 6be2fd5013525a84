"""Deterministic binary checkpoints.

Layout::

    b"HACTCKPT"                 8-byte magic
    uint32 little-endian        format version
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON, sorted keys, no whitespace
    tensor data                 little-endian float64, C order, in header order

The header lists every tensor as ``[name, shape]``; data follows in that
order with no padding.  Nothing time- or host-dependent is written, so equal
state gives byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HACTCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors stored as ``prefix/name``, keyed by ``name``."""
        p = prefix + "/"
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}

    def to_bytes(self) -> bytes:
        names = list(self.tensors)
        header = dict(self.header)
        header["tensors"] = [[n, list(self.tensors[n].shape)] for n in names]
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(blob)), blob]
        for n in names:
            parts.append(np.ascontiguousarray(self.tensors[n], dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", data[8:12])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", data[12:20])
        header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
        pos = 20 + hlen
        tensors = {}
        for name, shape in header.pop("tensors"):
            count = int(np.prod(shape)) if shape else 1
            end = pos + 8 * count
            if end > len(data):
                raise CheckpointError(f"checkpoint truncated inside tensor {name!r}")
            tensors[name] = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
            pos = end
        if pos != len(data):
            raise CheckpointError("trailing bytes after the last tensor")
        return cls(header, tensors)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
