"""Binary checkpoint container.

Layout (little-endian):

    b"BCAP"  u32 version  u32 record_count
    record:  u16 name_len  name(utf-8)  u8 dtype  u8 ndim  u32[ndim] shape
             u64 nbytes  raw bytes

dtype codes: 0 float32, 1 float64, 2 uint8, 3 int64.  Training metadata
(model config, epoch, history, RNG states, Adam step) is a uint8 record
named ``meta`` holding sorted-key JSON, so a save/load/save cycle is
byte-identical.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"BCAP"
VERSION = 1

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2, np.dtype("<i8"): 3}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION


def to_bytes(ckpt: Checkpoint) -> bytes:
    records = [("meta", np.frombuffer(json.dumps(ckpt.meta, sort_keys=True).encode(), dtype=np.uint8))]
    records += list(ckpt.tensors.items())
    out = [MAGIC, struct.pack("<II", ckpt.version, len(records))]
    for name, arr in records:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in _CODES:
            raise CheckpointError(f"cannot store dtype {arr.dtype} for {name!r}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        bname = name.encode()
        out.append(struct.pack("<H", len(bname)) + bname)
        out.append(struct.pack("<BB", _CODES[np.dtype(dt)], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<Q", len(raw)) + raw)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint reading {what}: expected {n} bytes, got {len(self.buf) - self.pos}",
                self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)
    meta = None
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "record name length")
        name = r.take(nlen, "record name").decode()
        at = r.pos
        code, ndim = r.unpack("<BB", f"dtype of {name!r}")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}", at)
        shape = r.unpack(f"<{ndim}I", f"shape of {name!r}")
        (nbytes,) = r.unpack("<Q", f"length of {name!r}")
        dt = _DTYPES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if nbytes != expected:
            raise CheckpointError(f"record {name!r} declares {nbytes} bytes but shape needs {expected}", r.pos - 8)
        arr = np.frombuffer(r.take(nbytes, f"data of {name!r}"), dtype=dt).reshape(shape).copy()
        if name == "meta":
            meta = json.loads(arr.tobytes().decode())
        else:
            tensors[name] = arr
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last record", r.pos)
    if meta is None:
        raise CheckpointError("checkpoint has no meta record")
    return Checkpoint(meta=meta, tensors=tensors, version=version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
