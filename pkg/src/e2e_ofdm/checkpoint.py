"""Single-file checkpoint container.

Layout::

    magic    8 bytes  b"E2EOFDM\\x00"
    version  u32 LE
    endian   u32 LE   0x01020304 (reads back differently on a byte-swapped host)
    mlen     u64 LE   manifest length in bytes
    manifest mlen bytes of UTF-8 JSON (sorted keys)
    padding  zero bytes up to an 8-byte boundary
    data     raw little-endian float64 tensors at the manifest offsets

No timestamps are stored, so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"E2EOFDM\x00"
VERSION = 1
ENDIAN_MARK = 0x01020304
_HEAD = struct.Struct("<8sIIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class TensorEntry:
    value: np.ndarray
    partition: str = "backbone"
    trainable: bool = True


@dataclass
class Checkpoint:
    tensors: dict[str, TensorEntry] = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        manifest_tensors = []
        offset = 0
        blobs = []
        for name in sorted(self.tensors):
            e = self.tensors[name]
            arr = np.ascontiguousarray(e.value, dtype="<f8")
            manifest_tensors.append({"name": name, "partition": e.partition, "trainable": bool(e.trainable),
                                     "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        manifest = {"tensors": manifest_tensors, "state": self.state, "config": self.config,
                    "config_hash": self.config_hash, "meta": self.meta}
        mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        head = _HEAD.pack(MAGIC, VERSION, ENDIAN_MARK, len(mbytes))
        pad = (-(len(head) + len(mbytes))) % 8
        return head + mbytes + b"\x00" * pad + b"".join(blobs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < _HEAD.size:
            raise CheckpointError("checkpoint: truncated header")
        magic, version, mark, mlen = _HEAD.unpack_from(raw)
        if magic != MAGIC:
            raise CheckpointError("checkpoint: bad magic, not a checkpoint file")
        if mark != ENDIAN_MARK:
            raise CheckpointError("checkpoint: endianness marker mismatch")
        if version != VERSION:
            raise CheckpointError(f"checkpoint: unsupported format version {version} (expected {VERSION})")
        start = _HEAD.size
        manifest = json.loads(raw[start:start + mlen].decode())
        base = start + mlen + ((-(start + mlen)) % 8)
        tensors = {}
        for t in manifest["tensors"]:
            n = int(np.prod(t["shape"], dtype=np.int64))
            lo = base + t["offset"]
            if lo + 8 * n > len(raw):
                raise CheckpointError(f"checkpoint: tensor '{t['name']}' runs past end of file")
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=lo).reshape(t["shape"])
            tensors[t["name"]] = TensorEntry(arr.astype(np.float64), t["partition"], t["trainable"])
        return cls(tensors, manifest["state"], manifest["config"], manifest["config_hash"], manifest["meta"])

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def partition_bytes(ck: Checkpoint, partition: str) -> bytes:
    """Concatenated raw bytes of one partition (for hashing / equality)."""
    return b"".join(np.ascontiguousarray(ck.tensors[n].value, "<f8").tobytes()
                    for n in sorted(ck.tensors) if ck.tensors[n].partition == partition)
