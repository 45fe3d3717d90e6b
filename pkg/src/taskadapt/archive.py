"""Flat binary dataset archives and IDX import.

Archive layout (little-endian)::

    magic      8 bytes   b"TADPDATA"
    version    u32       ARCHIVE_VERSION
    height     u32
    width      u32
    channels   u32
    classes    u32
    count      u32
    labels     count x u32
    pixels     count x height x width x channels u8, row-major (HWC per image)

Images load as float64 NCHW arrays scaled to [0, 1].
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .data import LabeledImages

MAGIC = b"TADPDATA"
ARCHIVE_VERSION = 1
_HEADER = struct.Struct("<8sIIIIII")


class ArchiveError(ValueError):
    pass


def quantize(images: np.ndarray) -> np.ndarray:
    """float NCHW in [0, 1] -> uint8 NHWC."""
    q = np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(q.transpose(0, 2, 3, 1))


def to_bytes(pixels: np.ndarray, labels: np.ndarray, num_classes: int) -> bytes:
    """``pixels`` is uint8 (N, H, W, C)."""
    pixels = np.asarray(pixels)
    labels = np.asarray(labels)
    if pixels.dtype != np.uint8 or pixels.ndim != 4:
        raise ArchiveError(f"pixels must be uint8 (N, H, W, C), got {pixels.dtype} {pixels.shape}")
    n, h, w, c = pixels.shape
    if labels.shape != (n,):
        raise ArchiveError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise ArchiveError(f"labels must lie in [0, {num_classes})")
    head = _HEADER.pack(MAGIC, ARCHIVE_VERSION, h, w, c, num_classes, n)
    return head + labels.astype("<u4").tobytes() + pixels.tobytes()


def from_bytes(data: bytes) -> tuple[np.ndarray, np.ndarray, int]:
    """``(pixels uint8 NHWC, labels int64, classes)``."""
    if len(data) < _HEADER.size:
        raise ArchiveError("archive is shorter than its header")
    magic, version, h, w, c, k, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ArchiveError(f"bad archive magic {magic!r}")
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"unsupported archive version {version} (expected {ARCHIVE_VERSION})")
    expected = _HEADER.size + 4 * n + n * h * w * c
    if len(data) != expected:
        raise ArchiveError(f"archive has {len(data)} bytes, header implies {expected}")
    off = _HEADER.size
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.int64)
    pixels = np.frombuffer(data, dtype=np.uint8, count=n * h * w * c, offset=off + 4 * n).reshape(n, h, w, c)
    if n and labels.max() >= k:
        raise ArchiveError(f"label {labels.max()} out of range for {k} classes")
    return pixels.copy(), labels, k


def save(path, data: LabeledImages) -> None:
    Path(path).write_bytes(to_bytes(quantize(data.images), data.labels, data.num_classes))


def load(path) -> LabeledImages:
    pixels, labels, k = from_bytes(Path(path).read_bytes())
    images = pixels.transpose(0, 3, 1, 2).astype(np.float64) / 255.0
    return LabeledImages(np.ascontiguousarray(images), labels, k)


# -- IDX ---------------------------------------------------------------------

def _open(path):
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def parse_idx(data: bytes) -> np.ndarray:
    """Unsigned-byte IDX array (big-endian header)."""
    if len(data) < 4:
        raise ArchiveError("IDX file is shorter than its magic number")
    zero, dtype, ndim = data[0:2], data[2], data[3]
    if zero != b"\x00\x00" or dtype != 0x08:
        raise ArchiveError(f"unsupported IDX magic {data[:4].hex()} (only unsigned-byte arrays)")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    start = 4 + 4 * ndim
    size = int(np.prod(dims)) if dims else 0
    if len(data) != start + size:
        raise ArchiveError(f"IDX payload has {len(data) - start} bytes, header implies {size}")
    return np.frombuffer(data, dtype=np.uint8, offset=start).reshape(dims).copy()


def import_idx(images_path, labels_path, num_classes: int | None = None) -> tuple[np.ndarray, np.ndarray, int]:
    """Digit-style IDX image/label pair -> ``(pixels NHWC, labels, classes)``."""
    images = parse_idx(_open(images_path))
    labels = parse_idx(_open(labels_path)).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1:
        raise ArchiveError(f"expected (N, H, W) images and (N,) labels, got {images.shape} and {labels.shape}")
    if images.shape[0] != labels.shape[0]:
        raise ArchiveError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return images[..., None], labels, k


def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (used for fixtures and round trips)."""
    array = np.asarray(array, dtype=np.uint8)
    head = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + array.tobytes())
