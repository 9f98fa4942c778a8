"""``TATCKPT1`` checkpoint files.

Layout (all integers little-endian)::

    magic      8 bytes  b"TATCKPT1"
    version    u16
    meta_len   u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    count      u32
    count x { name_len u32, name UTF-8, rank u8, dims u32 x rank, payload f32 x prod(dims) }
    crc32      u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TATCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    """Wrong magic bytes or malformed structure."""


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    @property
    def config_hash(self) -> str:
        return self.meta.get("config_hash", "")

    @property
    def rng_state(self):
        return self.meta.get("rng_state")

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", ckpt.version), struct.pack("<I", len(meta)), meta]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise CheckpointFormatError(f"{name}: rank {arr.ndim} too large")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(f"file ends inside {what} at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    head = raw[: len(MAGIC)]
    if head != MAGIC[: len(head)]:
        raise CheckpointFormatError(f"bad magic {head!r}")
    r.take(len(MAGIC), "magic")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_raw = r.take(meta_len, "metadata")
    (count,) = r.unpack("<I", "tensor count")
    entries = []
    for _ in range(count):
        (name_len,) = r.unpack("<I", "tensor name length")
        name_raw = r.take(name_len, "tensor name")
        (rank,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{rank}I", "tensor dims")
        n = int(np.prod(dims)) if rank else 1
        entries.append((name_raw, dims, r.take(4 * n, "tensor payload")))
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(raw):
        raise CheckpointFormatError(f"{len(raw) - r.pos} trailing bytes after checksum")
    # decode only once the bytes are known to be intact
    if zlib.crc32(raw[:body_end]) != crc:
        raise CheckpointChecksumError("CRC32 mismatch")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
        names = [name_raw.decode("utf-8") for name_raw, _, _ in entries]
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"undecodable metadata or tensor name: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    for name, (_, dims, payload) in zip(names, entries):
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    return Checkpoint(tensors, meta, version)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
