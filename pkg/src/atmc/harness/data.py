"""Datasets: MNIST IDX files and deterministic synthetic blob images."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "ATMC_DATA_DIR"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    """Malformed IDX file."""


@dataclass
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)

    def subset(self, n_train=None, n_test=None):
        return Dataset(
            self.name, self.x_train[:n_train], self.y_train[:n_train],
            self.x_test[:n_test], self.y_test[:n_test], self.n_classes, dict(self.meta),
        )

    def astype(self, dtype):
        return Dataset(
            self.name, self.x_train.astype(dtype), self.y_train,
            self.x_test.astype(dtype), self.y_test, self.n_classes, dict(self.meta),
        )


# -- IDX ---------------------------------------------------------------------------


def parse_idx(raw: bytes, expected_magic, name="<bytes>"):
    """Decode an unsigned-byte IDX payload into a uint8 array."""
    if len(raw) < 4:
        raise IdxFormatError(f"{name}: truncated header at offset 0 ({len(raw)} bytes)")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise IdxFormatError(
            f"{name}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{name}: truncated dimension header at offset 4")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < count:
        raise IdxFormatError(
            f"{name}: truncated payload at offset {len(raw)}: "
            f"expected {count} bytes after offset {header}, found {len(raw) - header}"
        )
    if len(raw) - header > count:
        raise IdxFormatError(f"{name}: {len(raw) - header - count} trailing bytes at offset {header + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def encode_idx(array, magic):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if (magic & 0xFF) != array.ndim:
        raise ValueError(f"magic 0x{magic:08x} implies {magic & 0xFF} dims, array has {array.ndim}")
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def _read(path):
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    data = path.read_bytes()
    return gzip.decompress(data) if path.suffix == ".gz" else data


def read_idx_images(path):
    arr = parse_idx(_read(path), IMAGES_MAGIC, str(path))
    if arr.ndim != 3:
        raise IdxFormatError(f"{path}: expected 3 dimensions, got {arr.ndim}")
    return arr


def read_idx_labels(path):
    return parse_idx(_read(path), LABELS_MAGIC, str(path))


def write_mnist_idx(directory, x_train, y_train, x_test, y_test):
    """Write uint8 images (N, 28, 28) and labels as the four MNIST IDX files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / MNIST_FILES["train_images"]).write_bytes(encode_idx(x_train, IMAGES_MAGIC))
    (d / MNIST_FILES["train_labels"]).write_bytes(encode_idx(y_train, LABELS_MAGIC))
    (d / MNIST_FILES["test_images"]).write_bytes(encode_idx(x_test, IMAGES_MAGIC))
    (d / MNIST_FILES["test_labels"]).write_bytes(encode_idx(y_test, LABELS_MAGIC))
    return d


def load_mnist(directory=None, dtype=np.float32) -> Dataset:
    """Load the four MNIST IDX files (optionally gzipped) from ``directory``.

    Falls back to ``$ATMC_DATA_DIR`` when no directory is given.  Pixels are
    scaled to [0, 1] by dividing the bytes by 255.
    """
    directory = directory or os.environ.get(DATA_DIR_ENV)
    if directory is None:
        raise FileNotFoundError(f"no MNIST directory given and ${DATA_DIR_ENV} is unset")
    d = Path(directory)
    splits = {}
    for split in ("train", "test"):
        images = read_idx_images(d / MNIST_FILES[f"{split}_images"])
        labels = read_idx_labels(d / MNIST_FILES[f"{split}_labels"])
        if labels.ndim != 1:
            raise IdxFormatError(f"{split} labels: expected 1 dimension, got {labels.ndim}")
        if len(images) != len(labels):
            raise IdxFormatError(
                f"{split}: {len(images)} images but {len(labels)} labels"
            )
        if labels.size and labels.max() > 9:
            raise IdxFormatError(f"{split}: label {labels.max()} out of range")
        splits[split] = ((images.astype(dtype) / dtype(255))[:, None], labels.astype(np.int64))
    (xtr, ytr), (xte, yte) = splits["train"], splits["test"]
    return Dataset("mnist", xtr, ytr, xte, yte, 10, {"source": str(d), "scale": "bytes/255"})


# -- synthetic ------------------------------------------------------------------------------


def _prototypes(n_classes, side, rng, n_blobs=2, contrast=0.8):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    width = side / 6.0
    protos = np.zeros((n_classes, side, side))
    for c in range(n_classes):
        for _ in range(n_blobs):
            cy, cx = rng.uniform(width, side - width, size=2)
            protos[c] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        protos[c] *= contrast / protos[c].max()
    return protos.reshape(n_classes, -1)


def centroid_margins(x, y, protos):
    """Distance from each point to the nearest wrong nearest-centroid boundary (negative if misclassified)."""
    own = protos[y]
    best = np.full(len(x), np.inf)
    for c in range(len(protos)):
        other = protos[c]
        diff = other - own
        norm = np.linalg.norm(diff, axis=1)
        # signed distance to the bisector of own and other, positive on own side
        dist = (np.sum((other ** 2 - own ** 2), axis=1) / 2 - x @ other + np.sum(x * own, axis=1)) / np.where(norm > 0, norm, 1)
        dist = np.where(y == c, np.inf, dist)
        best = np.minimum(best, dist)
    return best


def synth_dataset(side=8, n_classes=2, n_train=512, n_test=256, seed=0, noise=0.15, margin=0.5,
                  contrast=0.8, dtype=np.float32) -> Dataset:
    """Gaussian-blob images; every sample is at least ``margin`` (in l2) from the
    nearest-centroid decision boundary, so the classes are linearly separable.

    ``contrast`` is the peak brightness of each class prototype.  Lowering it
    moves the classes closer together relative to the noise and to small
    l-inf perturbations.
    """
    rng = np.random.default_rng(seed)
    protos = _prototypes(n_classes, side, rng, contrast=contrast)
    d = side * side

    def draw(n):
        xs, ys = [], []
        while sum(len(a) for a in xs) < n:
            y = rng.integers(0, n_classes, size=2 * n)
            x = np.clip(protos[y] + noise * rng.standard_normal((2 * n, d)), 0.0, 1.0)
            ok = centroid_margins(x, y, protos) >= margin
            xs.append(x[ok])
            ys.append(y[ok])
        return np.concatenate(xs)[:n], np.concatenate(ys)[:n]

    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    shape = (-1, 1, side, side)
    return Dataset(
        f"synth{side}", xtr.reshape(shape).astype(dtype), ytr.astype(np.int64),
        xte.reshape(shape).astype(dtype), yte.astype(np.int64), n_classes,
        {"seed": seed, "noise": noise, "margin": margin, "contrast": contrast, "prototypes": protos},
    )


def load_dataset(name, seed=0, data_dir=None, dtype=np.float32) -> Dataset:
    """Resolve a dataset name used by the command line."""
    if name == "mnist":
        return load_mnist(data_dir, dtype)
    if name == "synth8":
        return synth_dataset(8, 2, seed=seed, dtype=dtype)
    if name == "synth28":
        return synth_dataset(28, 10, n_train=2000, n_test=500, seed=seed, noise=0.25, margin=1.0, dtype=dtype)
    raise ValueError(f"unknown dataset {name!r}")


def export_mnist_subset(directory, n_test=1000, seed=0):
    """Write the 5,000-image MNIST sample bundled with ``mlxtend`` as IDX files.

    An offline stand-in for the full dataset: ``5000 - n_test`` training and
    ``n_test`` test images, split with a seeded shuffle.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    order = np.random.default_rng(seed).permutation(len(x))
    x = x[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    return write_mnist_idx(directory, x[n_test:], y[n_test:], x[:n_test], y[:n_test])
