"""Dataset ingestion (IDX, CSV), synthetic problem generators, batch iteration."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .tensor import SeededRng, as_f64, gaussian_fill

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str

    def __post_init__(self):
        if self.features.shape[0] < 1 or self.features.shape[0] != self.labels.shape[0]:
            raise ValidationError("features and labels must share a positive sample count")
        if np.any(self.labels < 0) or np.any(self.labels >= self.class_count):
            raise ValidationError("labels out of range")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("features must be finite")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.class_count, self.name)


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"truncated {what}: wanted {count} bytes, got {len(data)}")
    return data


def load_mnist_idx(images_path, labels_path, limit=None) -> Dataset:
    """Load an IDX image/label pair; pixels scaled to [0, 1], shape (N, 1, 28, 28)."""
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IDX_MAGIC_IMAGES:
            raise FormatError(f"bad image magic 0x{magic:08x}")
        take = n if limit is None else min(int(limit), n)
        raw = _read_exact(fh, take * rows * cols, "image payload")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(take, 1, rows, cols)
    with open(labels_path, "rb") as fh:
        magic, n_lab = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != IDX_MAGIC_LABELS:
            raise FormatError(f"bad label magic 0x{magic:08x}")
        if n_lab != n:
            raise ValidationError(f"image/label count mismatch: {n} vs {n_lab}")
        raw = _read_exact(fh, take, "label payload")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    features = images.astype(np.float64) / 255.0
    classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(features, labels, classes, "mnist_idx")


def write_idx_images(path, images: np.ndarray):
    """Write uint8 images (N, rows, cols) in IDX format (big-endian)."""
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, n, rows, cols))
        fh.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(path, labels: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_MAGIC_LABELS, labels.shape[0]))
        fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def load_csv(path, label_column) -> Dataset:
    """Numeric CSV with a header row; label classes indexed by first appearance."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty CSV file") from None
        if isinstance(label_column, int):
            label_idx = label_column + len(header) if label_column < 0 else label_column
        else:
            if label_column not in header:
                raise ValidationError(f"label column {label_column!r} not in header")
            label_idx = header.index(label_column)
        if not 0 <= label_idx < len(header):
            raise ValidationError("label column index out of range")
        rows, labels_raw = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"row {lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                rows.append([float(c) for i, c in enumerate(row) if i != label_idx])
            except ValueError as exc:
                raise FormatError(f"row {lineno}: {exc}") from None
            labels_raw.append(row[label_idx])
    if not rows:
        raise FormatError("CSV has a header but no data rows")
    mapping: dict[str, int] = {}
    labels = np.array([mapping.setdefault(lab, len(mapping)) for lab in labels_raw], dtype=np.int64)
    return Dataset(as_f64(rows), labels, len(mapping), Path(path).stem)


def synth_quadratic(dim: int, condition_number: float, seed: int):
    """Random SPD matrix with eigenvalues log-spaced over [1, condition_number].

    Returns ``(A, theta_star)`` where ``A = Q diag(logspace) Q^T`` for a seeded
    random orthogonal ``Q`` (modified Gram-Schmidt on a gaussian matrix).
    """
    if condition_number < 1:
        raise ValidationError("condition number must be >= 1")
    rng = SeededRng(seed)
    eigs = np.logspace(0.0, np.log10(condition_number), dim)
    g = gaussian_fill(rng, (dim, dim))
    q = np.zeros((dim, dim))
    for j in range(dim):
        v = g[:, j].copy()
        for i in range(j):
            v -= (q[:, i] @ v) * q[:, i]
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            raise ValidationError("degenerate random basis; try another seed")
        q[:, j] = v / norm
    a = q @ np.diag(eigs) @ q.T
    a = 0.5 * (a + a.T)
    theta_star = gaussian_fill(rng, (dim,))
    return a, theta_star


def batch_iter(ds: Dataset, batch_size: int, seed: int, shuffle: bool = True):
    """Index slices for one epoch: a seeded permutation cut into batches.

    The final short batch is kept. ``shuffle=False`` yields storage order.
    """
    if batch_size < 1 or batch_size > ds.n:
        raise ValidationError("batch_size must be in [1, N]")
    order = SeededRng(seed).permutation(ds.n) if shuffle else np.arange(ds.n)
    return [order[i:i + batch_size] for i in range(0, ds.n, batch_size)]


def synthetic_digits(seed: int, n: int, noise: float = 0.55, shift: int = 2):
    """Deterministic MNIST-format stand-in corpus: 10 prototype glyphs, jittered.

    Each sample is a per-class smooth prototype, randomly shifted by up to
    ``shift`` pixels, amplitude-jittered, and pixel-noised, then quantized to
    uint8. Returns ``(images uint8 (n, 28, 28), labels uint8 (n,))``.
    """
    rng = SeededRng(seed)
    protos = []
    base = SeededRng(0xD16175)
    yy, xx = np.mgrid[0:28, 0:28]
    for c in range(10):
        blob = np.zeros((28, 28))
        crng = base.spawn(c)
        centers = 4 + int(crng.uniform(1)[0] * 3)
        for _ in range(centers):
            u = crng.uniform(4)
            cy, cx = 6 + 16 * u[0], 6 + 16 * u[1]
            sy, sx = 2.0 + 4.0 * u[2], 2.0 + 4.0 * u[3]
            blob += np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        blob /= blob.max()
        protos.append(blob)
    labels = rng.integers(n, 10).astype(np.uint8)
    images = np.zeros((n, 28, 28))
    for i in range(n):
        p = protos[labels[i]]
        u = rng.uniform(3)
        dy = int(u[0] * (2 * shift + 1)) - shift
        dx = int(u[1] * (2 * shift + 1)) - shift
        img = np.roll(np.roll(p, dy, axis=0), dx, axis=1) * (0.75 + 0.5 * u[2])
        img = img + noise * rng.gaussian(28 * 28).reshape(28, 28) * 0.25
        images[i] = np.clip(img, 0.0, 1.0)
    return (images * 255.0).astype(np.uint8), labels


def write_synthetic_digits(out_dir, seed: int = 9, n_train: int = 2000, n_test: int = 500):
    """Materialize the synthetic corpus as IDX files; returns the four paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_img, train_lab = synthetic_digits(seed, n_train)
    test_img, test_lab = synthetic_digits(seed + 1, n_test)
    paths = {
        "train_images": out / "train-images-idx3-ubyte",
        "train_labels": out / "train-labels-idx1-ubyte",
        "test_images": out / "t10k-images-idx3-ubyte",
        "test_labels": out / "t10k-labels-idx1-ubyte",
    }
    write_idx_images(paths["train_images"], train_img)
    write_idx_labels(paths["train_labels"], train_lab)
    write_idx_images(paths["test_images"], test_img)
    write_idx_labels(paths["test_labels"], test_lab)
    return paths
