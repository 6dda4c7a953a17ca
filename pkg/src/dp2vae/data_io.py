"""MNIST IDX ingestion, synthetic-data export and binary checkpoints.

Checkpoint layout (all integers little-endian)::

    magic        8 bytes   b"DP2VAECK"
    version      u32
    meta_len     u32       followed by UTF-8 JSON metadata (sorted keys)
    n_tensors    u32
    per tensor:  u16 name length, UTF-8 name, u8 ndim, u64 x ndim shape,
                 float64 payload (C order)
    crc32        u32       over every preceding byte
"""

from __future__ import annotations

import gzip
import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, DataError, IdxFormatError, IntegrityError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
N_CLASSES = 10

CHECKPOINT_MAGIC = b"DP2VAECK"
CHECKPOINT_VERSION = 1


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    provenance: str = "real"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2:
            self.images = self.images.reshape(len(self.images), -1)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise DataError(f"labels must lie in 0..{N_CLASSES - 1}")
        if self.provenance not in ("real", "synthetic"):
            raise DataError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.provenance)


def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf: bytes, expected_magic: int, ndim: int) -> tuple[tuple, np.ndarray]:
    if len(buf) < 4:
        raise IdxFormatError("file too short for magic number", offset=len(buf))
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expected_magic:
        raise IdxFormatError(
            f"bad magic: expected 0x{expected_magic:08x}, found 0x{magic:08x}", offset=0)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError("truncated dimension header", offset=len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(buf) < expected:
        raise IdxFormatError(
            f"truncated payload: need {expected} bytes for dims {dims}, have {len(buf)}",
            offset=len(buf))
    if len(buf) > expected:
        raise IdxFormatError(f"{len(buf) - expected} trailing bytes after payload", offset=expected)
    data = np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)
    return dims, data


def read_idx_images(path) -> np.ndarray:
    """Images as float64 ``(N, rows, cols)`` scaled to [0, 1]. ``.gz`` is accepted."""
    _, data = _parse_idx(_read_bytes(path), IMAGE_MAGIC, 3)
    return data.astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    _, data = _parse_idx(_read_bytes(path), LABEL_MAGIC, 1)
    if data.size and data.max() >= N_CLASSES:
        bad = int(np.argmax(data >= N_CLASSES))
        raise DataError(f"label {data[bad]} out of range 0..{N_CLASSES - 1} at index {bad}")
    return data.astype(np.int64)


def load_dataset(images_path, labels_path, provenance="real") -> LabeledDataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise DataError(f"{images_path} has {len(images)} images, {labels_path} has {len(labels)} labels")
    return LabeledDataset(images.reshape(len(images), -1), labels, provenance)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path, side: int = 28):
    pixels = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    n = len(labels)
    try:
        with open(images_path, "wb") as f:
            f.write(struct.pack(">IIII", IMAGE_MAGIC, n, side, side))
            f.write(pixels.tobytes())
        with open(labels_path, "wb") as f:
            f.write(struct.pack(">II", LABEL_MAGIC, n))
            f.write(np.asarray(labels, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise OSError(f"failed writing IDX files {images_path}, {labels_path}: {exc}") from exc


def write_synthetic(dataset: LabeledDataset, directory, prefix="synthetic") -> tuple[str, str]:
    """Write a synthetic dataset as an IDX image/label pair (pixels quantized to bytes)."""
    if dataset.provenance != "synthetic":
        raise DataError("write_synthetic only exports synthetic-tagged datasets")
    side = int(round(np.sqrt(dataset.images.shape[1]))) if dataset.images.shape[1] else 28
    if side * side != dataset.images.shape[1]:
        raise DataError(f"{dataset.images.shape[1]} pixels is not a square image")
    os.makedirs(directory, exist_ok=True)
    images_path = os.path.join(directory, f"{prefix}-images-idx3-ubyte")
    labels_path = os.path.join(directory, f"{prefix}-labels-idx1-ubyte")
    write_idx(dataset.images, dataset.labels, images_path, labels_path, side)
    return images_path, labels_path


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode()
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw_name = name.encode()
        parts += [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<B", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = checkpoint_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 16 or buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise IntegrityError(f"{path}: checksum mismatch, file is corrupted")

    pos = 12
    try:
        (meta_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        metadata = json.loads(buf[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + name_len].decode()
            pos += name_len
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(buf) - 4:
                raise IntegrityError(f"{path}: tensor {name!r} runs past end of file")
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: malformed checkpoint body at offset {pos}: {exc}") from exc
    if pos != len(buf) - 4:
        raise IntegrityError(f"{path}: {len(buf) - 4 - pos} unexpected bytes before checksum")
    return Checkpoint(tensors, metadata)
