"""Datasets: IDX (MNIST/FashionMNIST) loading, deterministic splits, synthetic sets."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import rng_stream
from .errors import ConfigError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    tag: str = ""
    image_shape: tuple = field(default=None)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.features) != len(self.labels):
            raise ConfigError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, indices, tag=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.n_classes,
                       self.tag if tag is None else tag, self.image_shape)


def _read_bytes(path):
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except OSError as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"{path}: {exc}") from exc


def parse_idx_images(buf, name="<images>"):
    """Parse IDX image bytes into a ``(n, rows, cols)`` uint8 array."""
    if len(buf) < 16:
        raise FormatError(f"{name}: file too short for an IDX image header")
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IMAGES_MAGIC:
        raise FormatError(f"{name}: bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
    need = 16 + n * rows * cols
    if len(buf) != need:
        raise FormatError(f"{name}: header declares {n} images of {rows}x{cols} ({need} bytes), file has {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def parse_idx_labels(buf, name="<labels>"):
    if len(buf) < 8:
        raise FormatError(f"{name}: file too short for an IDX label header")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != LABELS_MAGIC:
        raise FormatError(f"{name}: bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
    if len(buf) != 8 + n:
        raise FormatError(f"{name}: header declares {n} labels, file has {len(buf) - 8}")
    return np.frombuffer(buf, dtype=np.uint8, offset=8)


def load_idx(images_path, labels_path=None, n_classes=10, tag=""):
    """Load IDX images (and labels) with pixels scaled to ``[0, 1]``.

    Without ``labels_path`` every label is 0, which is what unlabelled OOD
    sets need.
    """
    images = parse_idx_images(_read_bytes(images_path), str(images_path))
    if labels_path is None:
        labels = np.zeros(len(images), dtype=np.int64)
    else:
        labels = parse_idx_labels(_read_bytes(labels_path), str(labels_path))
        if len(labels) != len(images):
            raise FormatError(f"{len(images)} images but {len(labels)} labels")
    if len(labels) and labels.max() >= n_classes:
        raise FormatError(f"label {labels.max()} out of range for {n_classes} classes")
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(features, labels, n_classes, tag, images.shape[1:])


def idx_image_bytes(pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    return struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + pixels.tobytes()


def idx_label_bytes(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes()


def write_idx(dataset, images_path, labels_path, image_shape=None):
    """Write ``dataset`` as IDX files; features are quantized to ``round(255 x)``."""
    shape = image_shape or dataset.image_shape
    if shape is None:
        side = int(round(math.sqrt(dataset.dim)))
        if side * side != dataset.dim:
            raise ConfigError("image_shape is required for non-square feature vectors")
        shape = (side, side)
    pixels = np.rint(np.clip(dataset.features, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(idx_image_bytes(pixels.reshape(len(dataset), *shape)))
    with open(labels_path, "wb") as f:
        f.write(idx_label_bytes(dataset.labels))


def split(dataset, n_train, n_val, n_test, seed):
    """Disjoint, seed-deterministic shuffled partition into train/val/test."""
    sizes = (int(n_train), int(n_val), int(n_test))
    if min(sizes) < 0 or sum(sizes) > len(dataset):
        raise ConfigError(f"split sizes {sizes} exceed dataset of {len(dataset)}")
    perm = rng_stream(seed, 0).permutation(len(dataset))
    a, b = sizes[0], sizes[0] + sizes[1]
    return (dataset.subset(perm[:a], "train"),
            dataset.subset(perm[a:b], "val"),
            dataset.subset(perm[b:b + sizes[2]], "test"))


def make_two_moons(n, noise_sd=0.1, seed=0):
    """Two interleaved unit half-circles; class 0 gets ``ceil(n/2)`` points."""
    if n < 2:
        raise ConfigError("need n >= 2")
    rng = rng_stream(seed, 0)
    n0, n1 = (n + 1) // 2, n // 2
    t0 = rng.uniform(0.0, math.pi, n0)
    t1 = rng.uniform(0.0, math.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([upper, lower])
    if noise_sd > 0:
        x = x + rng.normal(0.0, noise_sd, x.shape)
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], 2, "two_moons")


def make_blobs(n, centers, sd=1.0, seed=0):
    """Isotropic Gaussian blobs, one class per center, labels assigned round-robin."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    rng = rng_stream(seed, 0)
    y = np.arange(n) % len(centers)
    x = centers[y] + rng.normal(0.0, sd, (n, centers.shape[1]))
    return Dataset(x, y, len(centers), "blobs")


def make_grid_gmm_points(n, seed=0):
    """Exact i.i.d. draws from the 25-mode grid mixture: ``(points, component)``."""
    from .targets import GmmTarget

    return GmmTarget().sample(rng_stream(seed, 0), n)
