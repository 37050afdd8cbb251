"""Dataset ingestion: IDX files (MNIST family) and a seeded synthetic blob generator."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IDXFormatError(ValueError):
    pass


def _read_bytes(path: str) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path: str) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: file ends at byte {len(raw)} before the 4-byte magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise IDXFormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    ndim = 3 if magic == IDX_IMAGES else 1
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{path}: header truncated at byte {len(raw)}, expected {header} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise IDXFormatError(f"{path}: data truncated at byte offset {len(raw)}, header declares {expected} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=expected - header, offset=header).reshape(dims)


def write_idx(path: str, array: np.ndarray):
    """Write a uint8 array of rank 1 (labels) or 3 (images) as IDX."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    if a.ndim not in (1, 3):
        raise IDXFormatError(f"IDX writer supports rank 1 or 3, got {a.ndim}")
    magic = IDX_LABELS if a.ndim == 1 else IDX_IMAGES
    payload = struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(payload)


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, classes) -> "Split":
        keep = np.isin(self.y, list(classes))
        return Split(self.x[keep], self.y[keep])


@dataclass
class DatasetHandle:
    name: str
    train: Split
    test: Split
    num_classes: int
    mean: float = 0.0
    std: float = 1.0
    source: str = ""
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        for split in (self.train, self.test):
            if len(split) and (split.y.min() < 0 or split.y.max() >= self.num_classes):
                raise ValueError(f"{self.name}: labels outside [0, {self.num_classes})")

    def describe(self) -> dict:
        return {
            "name": self.name,
            "train": len(self.train),
            "test": len(self.test),
            "num_classes": self.num_classes,
            "mean": self.mean,
            "std": self.std,
            "source": self.source,
            **self.notes,
        }


_IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _find(directory: str, stem: str) -> str:
    for suffix in ("", ".gz"):
        path = os.path.join(directory, stem + suffix)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_idx_dataset(path: str, mean: float | None = None, std: float | None = None, name: str = "mnist", limit: int | None = None) -> DatasetHandle:
    """Load the four standard IDX files from ``path`` as ``(B, 1, H, W)`` float images.

    Pixels are scaled to [0, 1] and standardized with ``mean``/``std``
    (training-set statistics when not given). ``limit`` keeps the first
    ``limit`` training and ``limit // 6`` test images.
    """
    arrays = {key: read_idx(_find(path, stem)) for key, stem in _IDX_NAMES.items()}
    for split in ("train", "test"):
        if len(arrays[f"{split}_images"]) != len(arrays[f"{split}_labels"]):
            raise IDXFormatError(f"{split} images and labels disagree in count")
    xtr = arrays["train_images"].astype(np.float64) / 255.0
    xte = arrays["test_images"].astype(np.float64) / 255.0
    ytr = arrays["train_labels"].astype(np.int64)
    yte = arrays["test_labels"].astype(np.int64)
    if limit is not None:
        xtr, ytr = xtr[:limit], ytr[:limit]
        xte, yte = xte[: max(1, limit // 6)], yte[: max(1, limit // 6)]
    mean = float(xtr.mean()) if mean is None else mean
    std = float(xtr.std()) if std is None else std
    num_classes = int(max(ytr.max(), yte.max()) + 1)
    return DatasetHandle(
        name,
        Split(((xtr - mean) / std)[:, None], ytr),
        Split(((xte - mean) / std)[:, None], yte),
        num_classes,
        mean,
        std,
        str(path),
    )


def make_blobs(n_train: int = 400, n_test: int = 200, classes: int = 4, features: int = 8, spread: float = 1.0, seed: int = 0) -> DatasetHandle:
    """Gaussian blobs around random unit-norm-ish centers; a synthetic stand-in for small tabular tasks."""
    rng = np.random.default_rng([seed, 17])
    centers = rng.normal(0.0, 2.0, size=(classes, features))

    def draw(n):
        y = np.arange(n) % classes
        rng.shuffle(y)
        return Split(centers[y] + spread * rng.standard_normal((n, features)), y)

    return DatasetHandle(
        "blobs", draw(n_train), draw(n_test), classes, source="synthetic", notes={"synthetic": True, "features": features}
    )


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index batches over ``n`` samples, shuffled when ``rng`` is given (last batch may be short)."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def export_mnist_subset_idx(directory: str, test_per_class: int = 100, seed: int = 0) -> str:
    """Write the 5,000-digit MNIST subset bundled with ``mlxtend`` as standard IDX files.

    Each class contributes ``test_per_class`` test images; the split is a
    seeded permutation, so repeated exports are byte-identical.
    """
    from mlxtend.data import mnist_data  # optional dependency

    x, y = mnist_data()
    x = x.astype(np.uint8).reshape(-1, 28, 28)
    y = y.astype(np.uint8)
    rng = np.random.default_rng([seed, 5000])
    test = np.concatenate([rng.permutation(np.flatnonzero(y == c))[:test_per_class] for c in range(10)])
    is_test = np.zeros(len(y), dtype=bool)
    is_test[test] = True
    train_idx = rng.permutation(np.flatnonzero(~is_test))
    test_idx = rng.permutation(test)
    os.makedirs(directory, exist_ok=True)
    write_idx(os.path.join(directory, _IDX_NAMES["train_images"]), x[train_idx])
    write_idx(os.path.join(directory, _IDX_NAMES["train_labels"]), y[train_idx])
    write_idx(os.path.join(directory, _IDX_NAMES["test_images"]), x[test_idx])
    write_idx(os.path.join(directory, _IDX_NAMES["test_labels"]), y[test_idx])
    return directory
