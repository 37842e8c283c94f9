"""Loaders for the MNIST IDX and CIFAR-10 binary test sets (plain or gzip-compressed)."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .io import FormatError

MNIST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
CIFAR_FILE = "test_batch.bin"
CIFAR_RECORD = 1 + 32 * 32 * 3


def _read(path: Path) -> bytes:
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return data


def _find(directory: Path, name: str) -> Path:
    for candidate in (name, name + ".gz", name.replace("-idx", ".idx"), name.replace("-idx", ".idx") + ".gz"):
        for base in (directory, directory / "cifar-10-batches-bin"):
            if (base / candidate).exists():
                return base / candidate
    raise FileNotFoundError(f"{name} not found in {directory}")


def read_idx(path) -> np.ndarray:
    data = _read(path)
    if len(data) < 4 or data[:2] != b"\0\0":
        raise FormatError(f"{path}: bad IDX magic")
    type_code, ndim = data[2], data[3]
    if type_code != 0x08:
        raise FormatError(f"{path}: only unsigned-byte IDX files are supported (type 0x{type_code:02x})")
    head = 4 + 4 * ndim
    if len(data) < head:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    n = int(np.prod(dims)) if dims else 0
    if len(data) != head + n:
        raise FormatError(f"{path}: payload has {len(data) - head} bytes, header promises {n}")
    return np.frombuffer(data, dtype=np.uint8, offset=head).reshape(dims)


def load_mnist_idx(path, labels_path=None, expected: int | None = None):
    """``(images (N, 28, 28, 1) in [0, 1] float32, labels (N,) int64)``.

    ``path`` is either a directory holding the test files or the image file
    itself (then ``labels_path`` names the label file).
    """
    path = Path(path)
    if path.is_dir():
        images_file, labels_file = _find(path, MNIST_FILES[0]), _find(path, MNIST_FILES[1])
    else:
        if labels_path is None:
            raise ValueError("labels_path is required when path is a file")
        images_file, labels_file = path, Path(labels_path)
    images = read_idx(images_file)
    labels = read_idx(labels_file)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise FormatError(f"{images_file}: expected (N, 28, 28) images, got {images.shape}")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise FormatError(f"{labels_file}: {labels.shape} labels for {images.shape[0]} images")
    if expected is not None and images.shape[0] != expected:
        raise FormatError(f"expected {expected} samples, found {images.shape[0]}")
    if labels.size and labels.max() > 9:
        raise FormatError(f"{labels_file}: label {labels.max()} out of range")
    return (images[..., None] / np.float32(255)).astype(np.float32), labels.astype(np.int64)


def load_cifar_bin(path, expected: int | None = None):
    """``(images (N, 32, 32, 3) in [0, 1] float32, labels (N,) int64)`` from a CIFAR-10 binary batch."""
    path = Path(path)
    if path.is_dir():
        path = _find(path, CIFAR_FILE)
    data = _read(path)
    if not data or len(data) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(data)} is not a whole number of {CIFAR_RECORD}-byte records")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label {labels.max()} out of range")
    if expected is not None and raw.shape[0] != expected:
        raise FormatError(f"expected {expected} samples, found {raw.shape[0]}")
    # records are channel-first (R plane, G plane, B plane)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return (images / np.float32(255)).astype(np.float32), labels


def load_dataset(network_name: str, directory):
    if network_name == "mnist":
        return load_mnist_idx(directory)
    if network_name.startswith("cifar"):
        return load_cifar_bin(directory)
    raise ValueError(f"no dataset loader for {network_name!r}")
