"""Datasets: MNIST-style IDX files, a seeded two-moons generator, batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


class IdxError(ValueError):
    pass


@dataclass
class Dataset:
    """Flattened inputs ``[N, d]`` in float64 plus integer labels in ``[0, k)``."""

    inputs: np.ndarray
    labels: np.ndarray
    k: int
    image_shape: tuple | None = field(default=None)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be [N, d], got shape {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.inputs[index], self.labels[index], self.k, self.image_shape)

    def head(self, n: int) -> "Dataset":
        return self.subset(slice(0, n))


# ---------------------------------------------------------------- IDX


def _read_header(buf: bytes, path, magic: int, ndims: int):
    need = 4 * (1 + ndims)
    if len(buf) < need:
        raise IdxError(f"{path}: truncated header ({len(buf)} bytes, need {need})")
    found = struct.unpack(">i", buf[:4])[0]
    if found != magic:
        raise IdxError(f"{path}: unexpected magic {found} (expected {magic})")
    return struct.unpack(f">{ndims}i", buf[4:need]), need


def _payload(buf: bytes, offset: int, count: int, path) -> np.ndarray:
    if len(buf) - offset < count:
        raise IdxError(f"{path}: truncated payload ({len(buf) - offset} bytes, expected {count})")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=offset)


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (n, rows, cols), off = _read_header(buf, path, IMAGES_MAGIC, 3)
    return _payload(buf, off, n * rows * cols, path).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (n,), off = _read_header(buf, path, LABELS_MAGIC, 1)
    return _payload(buf, off, n, path)


def load_idx(images_path, labels_path, k: int = 10) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxError(f"count mismatch: {len(images)} images in {images_path}, {len(labels)} labels in {labels_path}")
    if len(labels) and labels.max() >= k:
        raise IdxError(f"{labels_path}: label {labels.max()} out of range for {k} classes")
    n, rows, cols = images.shape
    return Dataset(images.reshape(n, rows * cols) / 255.0, labels.astype(np.int64), k, (rows, cols))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 ``images [N, rows, cols]`` and ``labels [N]`` as IDX files."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or labels.dtype != np.uint8:
        raise TypeError("IDX payloads must be uint8")
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise ValueError(f"bad shapes: images {images.shape}, labels {labels.shape}")
    Path(images_path).write_bytes(struct.pack(">4i", IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2i", LABELS_MAGIC, len(labels)) + labels.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(directory, split: str = "train") -> Dataset:
    d = Path(directory)
    img, lab = MNIST_FILES[split]
    return load_idx(d / img, d / lab)


# ---------------------------------------------------------------- synthetic


def moons_to_unit(points: np.ndarray) -> np.ndarray:
    """Fixed affine map taking the raw moons (x in [-1, 2], y in [-0.5, 1]) into [0,1]^2."""
    out = np.empty_like(points)
    out[:, 0] = (points[:, 0] + 1.5) / 4.0
    out[:, 1] = (points[:, 1] + 1.0) / 2.5
    return out


def two_moons(n: int, noise_sd: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved half-circles, ``n // 2`` points each, mapped into the unit square.

    Class 0 lies on ``(cos t, sin t)``, class 1 on ``(1 - cos t, 0.5 - sin t)``
    with ``t`` uniform in ``[0, pi]``. Noisy points are clipped to ``[0, 1]``.
    """
    if n <= 0 or n % 2:
        raise ValueError(f"n must be a positive even number, got {n}")
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be non-negative, got {noise_sd}")
    rng = np.random.default_rng(seed)
    half = n // 2
    t0 = rng.uniform(0.0, np.pi, half)
    t1 = rng.uniform(0.0, np.pi, half)
    raw = np.concatenate([
        np.stack([np.cos(t0), np.sin(t0)], 1),
        np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], 1),
    ])
    raw = raw + noise_sd * rng.standard_normal(raw.shape)
    labels = np.repeat([0, 1], half)
    order = rng.permutation(n)
    return Dataset(np.clip(moons_to_unit(raw), 0.0, 1.0)[order], labels[order], 2)


# ---------------------------------------------------------------- batching


def epoch_permutation(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0):
    """Yield ``(x, y)`` batches; ``shuffle_seed=None`` keeps the stored order.

    The last short batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else epoch_permutation(n, shuffle_seed, epoch)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.inputs[idx], dataset.labels[idx]


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def split(dataset: Dataset, n_first: int, seed: int | None = None):
    """Split into the first ``n_first`` samples and the rest (after an optional seeded shuffle)."""
    idx = np.arange(len(dataset)) if seed is None else np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(idx[:n_first]), dataset.subset(idx[n_first:])
