"""Loaders for MNIST (IDX) and CIFAR binary batches, plus patch extraction."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, TruncatedFileError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_IMAGE_BYTES = 32 * 32 * 3

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError("images must have shape (N, H, W, C)")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        elif len(self.labels) and self.labels.max() >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, n):
        return ImageDataset(self.images[:n], self.labels[:n], self.split, self.num_classes)


@dataclass
class PatchGrid:
    """Dense stride-1 grid of flattened patches, shape (rows, cols, T*T*C)."""

    patches: np.ndarray

    @property
    def grid_rows(self):
        return self.patches.shape[0]

    @property
    def grid_cols(self):
        return self.patches.shape[1]

    @property
    def dim(self):
        return self.patches.shape[2]


def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(data, magic, ndim):
    head = 4 + 4 * ndim
    if len(data) < 4:
        raise TruncatedFileError("IDX header truncated")
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise FormatError(f"bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(data) < head:
        raise TruncatedFileError("IDX header truncated")
    dims = struct.unpack(">" + "I" * ndim, data[4:head])
    count = int(np.prod(dims))
    if len(data) - head < count:
        raise TruncatedFileError(
            f"IDX payload has {len(data) - head} bytes, header promises {count}"
        )
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_mnist_idx(images_path, labels_path, split="train"):
    """Read an MNIST image/label pair of IDX files (optionally gzipped)."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError("image and label files disagree on record count")
    return ImageDataset(
        images[..., None].copy(), labels.astype(np.int64), split=split, num_classes=10
    )


def load_cifar_binary(paths: Sequence, variant="cifar10", split="train"):
    """Read CIFAR-10/100 binary batches.

    Each record is the label byte(s) followed by 3072 channel-planar RGB
    bytes. CIFAR-100 records carry (coarse, fine) labels; the fine one is used.
    """
    if variant not in ("cifar10", "cifar100"):
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    n_label = 1 if variant == "cifar10" else 2
    record = n_label + CIFAR_IMAGE_BYTES
    images, labels = [], []
    for path in paths:
        data = _read_bytes(path)
        if len(data) % record:
            raise FormatError(
                f"{path}: length {len(data)} is not a multiple of record size {record}"
            )
        arr = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
        labels.append(arr[:, n_label - 1].astype(np.int64))
        images.append(arr[:, n_label:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    num_classes = 10 if variant == "cifar10" else 100
    return ImageDataset(
        np.concatenate(images), np.concatenate(labels), split=split, num_classes=num_classes
    )


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "cifar10": {
        "dir": "cifar-10-batches-bin",
        "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
        "test": ["test_batch.bin"],
    },
    "cifar100": {
        "dir": "cifar-100-binary",
        "train": ["train.bin"],
        "test": ["test.bin"],
    },
}


def data_root(root=None):
    if root:
        return Path(root)
    return Path(os.environ.get("SMT_DATA_DIR", "data"))


def _find(directory, name):
    for candidate in (directory / name, directory / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name}[.gz] not found under {directory}")


def dataset_files(name, split, root=None):
    """Resolve the on-disk files for ``name`` ("mnist", "cifar10", "cifar100")."""
    root = data_root(root)
    if name == "mnist":
        for directory in (root / "mnist", root / "MNIST" / "raw", root):
            try:
                return [_find(directory, f) for f in MNIST_FILES[split]]
            except FileNotFoundError:
                continue
        raise FileNotFoundError(f"MNIST {split} files not found under {root}")
    if name in CIFAR_FILES:
        spec = CIFAR_FILES[name]
        for directory in (root / spec["dir"], root / name, root):
            try:
                return [_find(directory, f) for f in spec[split]]
            except FileNotFoundError:
                continue
        raise FileNotFoundError(f"{name} {split} files not found under {root}")
    raise ValueError(f"unknown dataset {name!r}")


def load_dataset(name, split, root=None):
    files = dataset_files(name, split, root)
    if name == "mnist":
        return load_mnist_idx(*files, split=split)
    return load_cifar_binary(files, variant=name, split=split)


def extract_patches(image, T) -> PatchGrid:
    """Every T x T patch at stride 1, flattened in (row, col, channel) order, scaled to [0, 1]."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    H, W, _ = image.shape
    if T < 1 or T > H or T > W:
        raise ValueError(f"patch size {T} does not fit a {H}x{W} image")
    return PatchGrid(extract_patches_batch(image[None], T)[0])


def extract_patches_batch(images, T):
    """Vectorised :func:`extract_patches` over (N, H, W, C) -> (N, R, C', T*T*C) float32."""
    images = np.asarray(images)
    N, H, W, C = images.shape
    if T < 1 or T > H or T > W:
        raise ValueError(f"patch size {T} does not fit a {H}x{W} image")
    scale = 1.0 / 255.0 if images.dtype == np.uint8 else 1.0
    win = sliding_window_view(images, (T, T), axis=(1, 2))  # N, R, C', C, T, T
    win = win.transpose(0, 1, 2, 4, 5, 3)
    out = win.reshape(N, H - T + 1, W - T + 1, T * T * C).astype(np.float32)
    if scale != 1.0:
        out *= np.float32(scale)
    return out


def horizontal_flip(image):
    """Reverse the column order (axis -2 for HWC images, axis -1 for HW)."""
    image = np.asarray(image)
    axis = -2 if image.ndim >= 3 else -1
    return np.flip(image, axis=axis).copy()


def to_grayscale(image):
    """BT.601 luma. uint8 input is rounded back to uint8; float input stays float."""
    image = np.asarray(image)
    if image.shape[-1] != 3:
        raise ValueError(f"expected 3 channels, got {image.shape[-1]}")
    y = image.astype(np.float64) @ LUMA_WEIGHTS
    if image.dtype == np.uint8:
        y = np.clip(np.rint(y), 0, 255).astype(np.uint8)
    return y[..., None]


def with_flips(dataset: ImageDataset) -> ImageDataset:
    """Append the horizontally flipped copy of every image."""
    flipped = np.flip(dataset.images, axis=2)
    return ImageDataset(
        np.concatenate([dataset.images, flipped]),
        np.concatenate([dataset.labels, dataset.labels]),
        dataset.split,
        dataset.num_classes,
    )
