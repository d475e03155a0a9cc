"""MNIST in the IDX container: big-endian header, raw unsigned bytes."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
N_CLASSES = 10


def read_header(data: bytes):
    """``(magic, dims)`` of an IDX blob. The third magic byte is the element
    type code, the fourth the number of dimensions."""
    if len(data) < 4:
        raise FormatError("file too short for an IDX magic number", offset=len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic >> 16 != 0:
        raise FormatError(f"bad IDX magic 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(data) < end:
        raise FormatError(f"header declares {ndim} dimensions but is truncated", offset=len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    return magic, dims


def _payload(data, magic_expected, what):
    magic, dims = read_header(data)
    if magic != magic_expected:
        raise FormatError(
            f"expected {what} magic 0x{magic_expected:08x}, found 0x{magic:08x}", offset=0)
    start = 4 + 4 * len(dims)
    need = int(np.prod(dims, dtype=np.int64))
    have = len(data) - start
    if have < need:
        raise FormatError(f"{what} payload truncated: need {need} bytes, have {have}",
                          offset=len(data))
    return dims, np.frombuffer(data, dtype=np.uint8, count=need, offset=start)


def parse_idx_images(data: bytes) -> np.ndarray:
    """``n x (rows*cols)`` float64 matrix scaled to [0, 1]."""
    dims, raw = _payload(data, IMAGE_MAGIC, "image")
    n, rows, cols = dims
    return raw.reshape(n, rows * cols) / 255.0


def parse_idx_labels(data: bytes) -> np.ndarray:
    dims, raw = _payload(data, LABEL_MAGIC, "label")
    bad = np.flatnonzero(raw >= N_CLASSES)
    if bad.size:
        raise FormatError(f"label {int(raw[bad[0]])} out of range [0, 9]", offset=8 + int(bad[0]))
    return raw.astype(np.int64)


def image_dims(data: bytes):
    _, dims = read_header(data)
    return dims


def denormalize(images) -> np.ndarray:
    """Recover the original pixel bytes from scaled images."""
    return np.rint(np.asarray(images) * 255.0).astype(np.uint8)


def serialize_idx_images(images, rows: int = 28, cols: int = 28) -> bytes:
    pixels = denormalize(images)
    if pixels.ndim != 2 or pixels.shape[1] != rows * cols:
        raise ContractViolation(f"images shaped {pixels.shape} do not fit {rows}x{cols}")
    return struct.pack(">4I", IMAGE_MAGIC, pixels.shape[0], rows, cols) + pixels.tobytes()


def serialize_idx_labels(labels) -> bytes:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
        raise ContractViolation("labels must lie in [0, 9]")
    return struct.pack(">2I", LABEL_MAGIC, labels.size) + labels.astype(np.uint8).tobytes()


@dataclass
class MnistDataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ContractViolation(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.labels.shape[0]

    def head(self, n):
        if n is None or n >= len(self):
            return self
        return MnistDataset(self.images[:n], self.labels[:n])

    @classmethod
    def load(cls, images_path, labels_path) -> "MnistDataset":
        return cls(parse_idx_images(Path(images_path).read_bytes()),
                   parse_idx_labels(Path(labels_path).read_bytes()))


def describe(data: bytes) -> dict:
    """Header fields for ``inspect-idx``."""
    magic, dims = read_header(data)
    kind = {IMAGE_MAGIC: "images", LABEL_MAGIC: "labels"}.get(magic, "unknown")
    return {"magic": f"0x{magic:08x}", "kind": kind, "type_code": f"0x{(magic >> 8) & 0xFF:02x}",
            "dims": list(dims), "payload_bytes": len(data) - 4 - 4 * len(dims)}
