"""Synthetic generators, MNIST IDX ingestion and minibatching."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


@dataclass
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray | None = None
    name: str = "dataset"
    n_classes: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            self.points = self.points.reshape(len(self.points), -1)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.intp)
            if self.labels.shape != (len(self.points),):
                raise ContractError("labels must have one entry per point")
            if self.labels.size and self.labels.max() >= self.n_classes:
                raise ContractError("label value exceeds class count")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index) -> "LabeledDataset":
        labels = None if self.labels is None else self.labels[index]
        return LabeledDataset(self.points[index], labels, self.name, self.n_classes,
                              dict(self.metadata))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.dim)] + ["label"])
            for i, row in enumerate(self.points):
                label = "" if self.labels is None else int(self.labels[i])
                w.writerow([repr(float(v)) for v in row] + [label])


def gen_pinwheel(n_per_class: int, classes: int = 5, seed=None, radial_std: float = 0.3,
                 tangential_std: float = 0.05, rate: float = 0.25) -> LabeledDataset:
    """Curved wings: radial Gaussians rotated by ``rate * radius`` plus the class angle."""
    if n_per_class < 1 or classes < 1:
        raise ContractError("pinwheel needs n_per_class >= 1 and classes >= 1")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    feats = rng.standard_normal((classes * n_per_class, 2)) * [radial_std, tangential_std]
    feats[:, 0] += 1.0
    angles = 2 * np.pi * labels / classes + rate * feats[:, 0]
    c, s = np.cos(angles), np.sin(angles)
    pts = np.stack([feats[:, 0] * c - feats[:, 1] * s, feats[:, 0] * s + feats[:, 1] * c], axis=1)
    return LabeledDataset(pts, labels, "pinwheel", classes)


def gen_two_circles(n_per_class: int, seed=None, radii=(1.0, 0.5),
                    noise_std: float = 0.03) -> LabeledDataset:
    radii = tuple(float(r) for r in radii)
    if len(set(radii)) != len(radii) or min(radii) <= 0:
        raise ContractError("circle radii must be distinct and positive")
    if n_per_class < 1:
        raise ContractError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(radii)), n_per_class)
    theta = rng.uniform(0, 2 * np.pi, size=labels.size)
    r = np.asarray(radii)[labels] + noise_std * rng.standard_normal(labels.size)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return LabeledDataset(pts, labels, "two_circles", len(radii))


# ----------------------------------------------------------------------------
# IDX
# ----------------------------------------------------------------------------

def _open(path: str | Path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx_images(path: str | Path) -> np.ndarray:
    with _open(path) as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise FormatError(f"{path}: truncated IDX header")
        magic, n, rows, cols = struct.unpack(">iiii", head)
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"{path}: bad image magic {magic}")
        if (rows, cols) != (28, 28):
            raise FormatError(f"{path}: expected 28x28 images, got {rows}x{cols}")
        payload = fh.read()
    if len(payload) != n * rows * cols:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {n * rows * cols}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    with _open(path) as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise FormatError(f"{path}: truncated IDX header")
        magic, n = struct.unpack(">ii", head)
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"{path}: bad label magic {magic}")
        payload = fh.read()
    if len(payload) != n:
        raise FormatError(f"{path}: payload has {len(payload)} labels, expected {n}")
    return np.frombuffer(payload, dtype=np.uint8).copy()


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 28, 28)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, len(images), 28, 28))
        fh.write(images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def idx_from_csv(csv_path: str | Path, out_dir: str | Path,
                 prefix: str = "train") -> tuple[Path, Path]:
    """Convert a CSV of 784 pixel columns followed by a label column into IDX files."""
    with _open(csv_path) as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    if table.ndim != 2 or table.shape[1] != 785:
        raise FormatError(f"{csv_path}: expected 785 columns, got shape {table.shape}")
    if table.min() < 0 or table[:, :784].max() > 255 or table[:, 784].max() > 9:
        raise FormatError(f"{csv_path}: pixel or label values out of range")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, labels = out / f"{prefix}-images-idx3-ubyte", out / f"{prefix}-labels-idx1-ubyte"
    write_idx_images(images, table[:, :784])
    write_idx_labels(labels, table[:, 784])
    return images, labels


def logit_transform(pixels: np.ndarray, alpha: float = 0.05) -> np.ndarray:
    p = alpha + (1 - 2 * alpha) * pixels
    return np.log(p / (1 - p))


def inverse_logit_transform(y: np.ndarray, alpha: float = 0.05) -> np.ndarray:
    return (1.0 / (1.0 + np.exp(-y)) - alpha) / (1 - 2 * alpha)


def load_mnist_idx(images_path: str | Path, labels_path: str | Path,
                   digits: Iterable[int] = range(10), seed=None, limit: int | None = None,
                   dequantize: bool = True, logit: bool = True) -> LabeledDataset:
    """Flattened digits filtered to ``digits`` with labels remapped to 0..len(digits)-1.

    Pixels are scaled to [0, 1]; by default U(0, 1/256) noise is added and
    the result logit-transformed with ``p = 0.05 + 0.9 x``. ``limit`` keeps
    the first that many filtered images.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    digits = sorted(set(int(d) for d in digits))
    keep = np.flatnonzero(np.isin(labels, digits))
    if limit is not None:
        keep = keep[:limit]
    remap = {d: i for i, d in enumerate(digits)}
    x = images[keep].reshape(len(keep), 28 * 28).astype(np.float64) / 255.0
    if dequantize:
        x = x + np.random.default_rng(seed).uniform(0.0, 1.0 / 256.0, size=x.shape)
    if logit:
        x = logit_transform(x)
    y = np.array([remap[int(v)] for v in labels[keep]], dtype=np.intp)
    return LabeledDataset(x, y, "mnist", len(digits),
                          {"digits": digits, "dequantize": dequantize, "logit": logit})


# ----------------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------------

def minibatch_indices(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise ContractError("batch size must be >= 1")
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def minibatches(data: LabeledDataset, batch_size: int, seed=None) -> Iterator[LabeledDataset]:
    """One shuffled epoch; the last batch may be short."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for idx in minibatch_indices(len(data), batch_size, rng):
        yield data.subset(idx)
