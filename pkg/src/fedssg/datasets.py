"""Datasets, IDX ingestion and client partitioning."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ObjectiveSpec
from .numkit import RngStream

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class FormatError(ValueError):
    """Malformed IDX file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, path, offset: int):
        super().__init__(f"{path}: {message} (at byte offset {offset})")
        self.path = str(path)
        self.offset = offset


class ConfigurationError(ValueError):
    pass


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.inputs[index], self.labels[index], self.class_count)


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _read_header(raw: bytes, path, magic: int, n_dims: int):
    need = 4 * (1 + n_dims)
    if len(raw) < need:
        raise FormatError("truncated header", path, len(raw))
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"bad magic number 0x{found:08x}, expected 0x{magic:08x}", path, 0)
    return struct.unpack(">" + "I" * n_dims, raw[4:need]), need


def load_idx(images_path, labels_path, class_count: int = 10) -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    img_raw = _read_bytes(images_path)
    lab_raw = _read_bytes(labels_path)
    (n_img, rows, cols), img_off = _read_header(img_raw, images_path, IMAGES_MAGIC, 3)
    (n_lab,), lab_off = _read_header(lab_raw, labels_path, LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise FormatError(f"image count {n_img} != label count {n_lab}", labels_path, 4)
    if len(img_raw) < img_off + n_img * rows * cols:
        raise FormatError("truncated image data", images_path, len(img_raw))
    if len(lab_raw) < lab_off + n_lab:
        raise FormatError("truncated label data", labels_path, len(lab_raw))
    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=n_img * rows * cols, offset=img_off)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, count=n_lab, offset=lab_off).astype(np.int64)
    if labels.size and labels.max() >= class_count:
        bad = int(np.argmax(labels >= class_count))
        raise FormatError(f"label {labels[bad]} >= class_count {class_count}", labels_path, lab_off + bad)
    inputs = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    return LabeledDataset(inputs, labels, class_count)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem} not found in {directory}")


def load_mnist(data_dir=None):
    """Load the MNIST train/test pair from ``data_dir``.

    Falls back to the ``FEDLAB_DATA_DIR`` environment variable. Both plain
    and gzipped IDX files are accepted.
    """
    data_dir = data_dir or os.environ.get("FEDLAB_DATA_DIR")
    if not data_dir:
        raise FileNotFoundError("no MNIST directory given and FEDLAB_DATA_DIR is unset")
    directory = Path(data_dir)
    paths = {key: _find(directory, stem) for key, stem in MNIST_FILES.items()}
    train = load_idx(paths["train_images"], paths["train_labels"])
    test = load_idx(paths["test_images"], paths["test_labels"])
    return train, test


# ---------------------------------------------------------------------------
# partitioning


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps ties in client order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _repair_empty(assignments: list) -> list:
    while True:
        sizes = [len(a) for a in assignments]
        empty = [i for i, s in enumerate(sizes) if s == 0]
        if not empty:
            return assignments
        donor = int(np.argmax(sizes))
        assignments[empty[0]].append(assignments[donor].pop())


def dirichlet_partition(labels, n_clients: int, concentration: float, rng: RngStream) -> list:
    """Label-skewed split: per class, client shares ~ Dirichlet(concentration).

    Returns one sorted index array per client. The lists form an exact
    cover of ``range(len(labels))`` and none is empty.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n_clients < 1:
        raise ConfigurationError("n_clients must be at least 1")
    if not concentration > 0:
        raise ConfigurationError("concentration must be positive")
    if n_clients > n:
        raise ConfigurationError(f"n_clients={n_clients} exceeds sample count {n}")
    assignments = [[] for _ in range(n_clients)]
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        if n_clients == 1:
            shares = np.ones(1)
        else:
            shares = rng.dirichlet(np.full(n_clients, float(concentration)))
        counts = _largest_remainder(shares, idx.shape[0])
        start = 0
        for client, cnt in enumerate(counts):
            assignments[client].extend(idx[start:start + cnt].tolist())
            start += cnt
    _repair_empty(assignments)
    return [np.array(sorted(a), dtype=np.int64) for a in assignments]


def iid_partition(labels, n_clients: int, rng: RngStream) -> list:
    """Class-stratified round-robin split (near-equal label mix per client)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n_clients < 1 or n_clients > n:
        raise ConfigurationError(f"n_clients must be in [1, {n}]")
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
    offset = int(rng.integers(n_clients))
    assignments = [[] for _ in range(n_clients)]
    for pos, sample in enumerate(order):
        assignments[(pos + offset) % n_clients].append(int(sample))
    return [np.array(sorted(a), dtype=np.int64) for a in assignments]


def label_statistics(labels, partition, class_count: int):
    """Per-client (max class fraction, label entropy in nats)."""
    labels = np.asarray(labels)
    max_frac, entropy = [], []
    for idx in partition:
        hist = np.bincount(labels[idx], minlength=class_count).astype(np.float64)
        p = hist / hist.sum()
        max_frac.append(p.max())
        nz = p[p > 0]
        entropy.append(float(-(nz * np.log(nz)).sum()))
    return np.array(max_frac), np.array(entropy)


# ---------------------------------------------------------------------------
# synthetic tasks


def synthetic_quadratic_task(
    n_clients: int,
    dim: int,
    heterogeneity: float,
    rng: RngStream,
    l_max: float = 2.0,
) -> list:
    """Per-client quadratics with SPD Hessians, eigenvalues in [0.5, l_max].

    Client optima are a shared random centre plus noise whose spread is
    ``heterogeneity``.
    """
    if dim < 1:
        raise ConfigurationError("dim must be at least 1")
    if l_max < 0.5:
        raise ConfigurationError("l_max must be >= 0.5")
    centre = rng.normal(size=dim)
    specs = []
    for _ in range(n_clients):
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        eig = rng.uniform(0.5, l_max, size=dim)
        A = (q * eig) @ q.T
        A = 0.5 * (A + A.T)
        theta_star = centre + heterogeneity * rng.normal(size=dim)
        specs.append(ObjectiveSpec("quadratic", A=A, theta_star=theta_star))
    return specs


def quadratic_global_minimizer(specs) -> np.ndarray:
    """Closed-form minimiser of the client-average quadratic."""
    H = sum(s.A for s in specs)
    b = sum(s.A @ s.theta_star for s in specs)
    return np.linalg.solve(H, b)


def synthetic_classification(
    n_samples: int,
    n_features: int,
    n_classes: int,
    rng: RngStream,
    separation: float = 2.0,
    noise: float = 1.0,
) -> LabeledDataset:
    """Gaussian class clusters with balanced labels."""
    means = separation * rng.normal(size=(n_classes, n_features)) / np.sqrt(n_features)
    labels = np.arange(n_samples) % n_classes
    labels = labels[rng.permutation(n_samples)]
    inputs = means[labels] + noise * rng.normal(size=(n_samples, n_features)) / np.sqrt(n_features)
    return LabeledDataset(inputs, labels, n_classes)
