"""IDX parsing, dataset assembly, and PGM / CSV writers."""
from __future__ import annotations

import csv
import gzip
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LABEL_MAGIC = 0x00000801
IMAGE_MAGIC = 0x00000803

SOURCE_URLS = {
    "mnist": "http://yann.lecun.com/exdb/mnist/",
    "fashion-mnist": "https://github.com/zalandoresearch/fashion-mnist",
}

_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxError(ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


@dataclass
class IdxFile:
    magic: int
    dims: tuple
    payload: np.ndarray  # uint8, shaped by dims

    def __eq__(self, other):
        return (isinstance(other, IdxFile) and self.magic == other.magic
                and tuple(self.dims) == tuple(other.dims)
                and np.array_equal(self.payload, other.payload))


@dataclass
class Dataset:
    images: np.ndarray  # (n, 784) floats in [0, 1]
    labels: np.ndarray  # (n,) ints
    name: str = "mnist"
    split: str = "train"

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int | None, seed: int | None = None) -> Dataset:
        """First ``n`` items, or a seeded random sample of ``n`` items."""
        if n is None or n >= len(self):
            return self
        if seed is None:
            idx = np.arange(n)
        else:
            idx = np.sort(np.random.default_rng(seed).choice(len(self), n, replace=False))
        return Dataset(self.images[idx], self.labels[idx], self.name, self.split)


def parse_idx(buf: bytes) -> IdxFile:
    if len(buf) < 4:
        raise IdxError(f"truncated header: need 4 bytes for magic, got {len(buf)}", 0)
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in (LABEL_MAGIC, IMAGE_MAGIC):
        raise IdxError(f"bad magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxError(f"dimension count mismatch: magic declares {ndim} dims but header has "
                       f"{(len(buf) - 4) // 4}", 4)
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = math.prod(dims)
    have = len(buf) - header
    if have < need:
        raise IdxError(f"truncated payload: expected {need} bytes, got {have}", header)
    if have > need:
        raise IdxError(f"{have - need} trailing bytes after payload", header + need)
    payload = np.frombuffer(buf, dtype=np.uint8, count=need, offset=header).reshape(dims)
    return IdxFile(magic, tuple(dims), payload)


def serialize_idx(idx: IdxFile) -> bytes:
    head = struct.pack(">I", idx.magic) + struct.pack(f">{len(idx.dims)}I", *idx.dims)
    return head + np.ascontiguousarray(idx.payload, dtype=np.uint8).tobytes()


def read_idx(path) -> IdxFile:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


def to_dataset(images: IdxFile, labels: IdxFile, name="mnist", split="train") -> Dataset:
    if images.magic != IMAGE_MAGIC or labels.magic != LABEL_MAGIC:
        raise ValueError("expected an image file and a label file")
    n = images.dims[0]
    if labels.dims[0] != n:
        raise ValueError(f"item count mismatch: {n} images vs {labels.dims[0]} labels")
    flat = images.payload.reshape(n, -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.payload.astype(np.int64), name, split)


def _find(directory: Path, stem: str) -> Path:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = directory / cand
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem} not found in {directory}")


def load_dataset(directory, split="train", name="mnist") -> Dataset:
    """Load the standard four-file layout from a local directory."""
    directory = Path(directory)
    img_stem, lbl_stem = _FILES[split]
    return to_dataset(read_idx(_find(directory, img_stem)), read_idx(_find(directory, lbl_stem)), name, split)


# ----------------------------------------------------------------- writers

def image_grid(images, cols: int, side: int = 28, separator: int = 255) -> np.ndarray:
    """Tile flattened images row-major with 1-pixel separators into a uint8 canvas."""
    images = [np.asarray(im, dtype=np.float64).reshape(side, side) for im in images]
    if not images:
        raise ValueError("no images to tile")
    cols = max(1, min(cols, len(images)))
    rows = math.ceil(len(images) / cols)
    h = rows * side + rows - 1
    w = cols * side + cols - 1
    canvas = np.full((h, w), separator, dtype=np.uint8)
    for k, im in enumerate(images):
        r, c = divmod(k, cols)
        y, x = r * (side + 1), c * (side + 1)
        canvas[y:y + side, x:x + side] = np.round(np.clip(im, 0.0, 1.0) * 255).astype(np.uint8)
    # cells past the last image stay black
    for k in range(len(images), rows * cols):
        r, c = divmod(k, cols)
        canvas[r * (side + 1):r * (side + 1) + side, c * (side + 1):c * (side + 1) + side] = 0
    return canvas


def write_image_grid(images, cols, path, side=28) -> None:
    canvas = image_grid(images, cols, side)
    h, w = canvas.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(canvas.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PGM file")
    w, h = int(m.group(1)), int(m.group(2))
    data = raw[m.end():m.end() + w * h]
    if len(data) != w * h:
        raise ValueError(f"PGM payload: expected {w * h} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(rows, header, path) -> None:
    width = len(header)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            row = list(row)
            if len(row) != width:
                raise ValueError(f"row has {len(row)} fields, header has {width}")
            w.writerow([_fmt(v) for v in row])
