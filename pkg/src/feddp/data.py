"""Datasets and non-IID client partitioning."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from feddp.errors import FormatError, PartitionError

# Per-channel statistics of the CIFAR-10 training set (pixels scaled to [0, 1]).
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR10_RECORD = 3073
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"

MAX_PARTITION_RETRIES = 100


@dataclass
class LabeledDataset:
    images: np.ndarray   # (n, C, H, W), standardized
    labels: np.ndarray   # (n,) int64
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise FormatError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")
        if len(self.labels) < 1:
            raise FormatError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise FormatError(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count)

    def astype(self, dtype) -> LabeledDataset:
        return LabeledDataset(self.images.astype(dtype), self.labels, self.class_count)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def standardize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=images.dtype)[None, :, None, None]
    std = np.asarray(std, dtype=images.dtype)[None, :, None, None]
    return (images - mean) / std


# -- synthetic --------------------------------------------------------------

def _prototypes(classes, channels, size, rng):
    """One Gaussian blob per class: its own centre, width and colour."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    protos = np.empty((classes, channels, size, size))
    for k in range(classes):
        cy, cx = rng.uniform(0, size - 1, size=2)
        width = rng.uniform(0.15, 0.35) * size
        colour = rng.uniform(0.2, 1.0, size=channels)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        protos[k] = 0.5 + 0.5 * (colour[:, None, None] * blob - 0.5 * blob.mean())
    return np.clip(protos, 0.0, 1.0)


def synth_splits(classes: int, per_class: int, test_per_class: int = 0, image_size: int = 8,
                 seed: int = 0, noise: float = 0.5, channels: int = 3):
    """Train and test sets drawn around the same class prototypes.

    Pixels are ``prototype + noise * N(0, 1)`` clipped to [0, 1], then
    standardized per channel with the training split's statistics.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    protos = _prototypes(classes, channels, image_size, rng)

    def draw(n):
        labels = np.repeat(np.arange(classes), n)
        imgs = protos[labels] + noise * rng.standard_normal((len(labels), channels,
                                                             image_size, image_size))
        return np.clip(imgs, 0.0, 1.0), labels

    train_x, train_y = draw(per_class)
    test_x, test_y = draw(test_per_class) if test_per_class else (None, None)
    mean = train_x.mean(axis=(0, 2, 3))
    std = train_x.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    train = LabeledDataset(standardize(train_x, mean, std), train_y, classes)
    test = None
    if test_x is not None:
        test = LabeledDataset(standardize(test_x, mean, std), test_y, classes)
    return train, test


def synth_dataset(classes: int, per_class: int, image_size: int = 8, seed: int = 0,
                  noise: float = 0.5, channels: int = 3) -> LabeledDataset:
    return synth_splits(classes, per_class, 0, image_size, seed, noise, channels)[0]


# -- CIFAR-10 ---------------------------------------------------------------

def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (n, 3, 32, 32) and labels from one binary batch file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read CIFAR-10 batch {path}: {exc.strerror or exc}") from exc
    if len(raw) % CIFAR10_RECORD:
        n_full = len(raw) // CIFAR10_RECORD
        raise FormatError(
            f"{path.name}: truncated record at byte offset {n_full * CIFAR10_RECORD} "
            f"({len(raw) - n_full * CIFAR10_RECORD} of {CIFAR10_RECORD} bytes present)")
    if not raw:
        raise FormatError(f"{path.name}: empty batch file")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(
            f"{path.name}: label byte {labels[bad[0]]} > 9 in record {bad[0]} "
            f"(offset {bad[0] * CIFAR10_RECORD})")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def cifar10_dataset(images_u8: np.ndarray, labels: np.ndarray, dtype=np.float32) -> LabeledDataset:
    x = images_u8.astype(dtype) / 255.0
    return LabeledDataset(standardize(x, CIFAR10_MEAN, CIFAR10_STD), labels, 10)


def load_cifar10(path, dtype=np.float32) -> tuple[LabeledDataset, LabeledDataset]:
    """(train, test) from a ``cifar-10-batches-bin`` directory."""
    path = Path(path)
    parts = [read_cifar10_batch(path / f) for f in CIFAR10_TRAIN_FILES]
    train = cifar10_dataset(np.concatenate([p[0] for p in parts]),
                            np.concatenate([p[1] for p in parts]), dtype)
    test = cifar10_dataset(*read_cifar10_batch(path / CIFAR10_TEST_FILE), dtype)
    return train, test


# -- partitioning -----------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    beta: float
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.num_clients < 1:
            raise PartitionError("num_clients must be >= 1")
        if not self.beta > 0:
            raise PartitionError("beta must be > 0")
        if not 0 <= self.validation_fraction < 1:
            raise PartitionError("validation_fraction must be in [0, 1)")


@dataclass
class Partition:
    train: list[np.ndarray]
    val: list[np.ndarray]

    @property
    def num_clients(self) -> int:
        return len(self.train)

    def client_indices(self, k: int) -> np.ndarray:
        return np.concatenate([self.train[k], self.val[k]])

    def to_json(self) -> str:
        doc = {str(k): {"train": self.train[k].tolist(), "val": self.val[k].tolist()}
               for k in range(self.num_clients)}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> Partition:
        doc = json.loads(text)
        keys = sorted(doc, key=int)
        return cls([np.asarray(doc[k]["train"], dtype=np.int64) for k in keys],
                   [np.asarray(doc[k]["val"], dtype=np.int64) for k in keys])

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def histogram(self, labels: np.ndarray, classes: int) -> np.ndarray:
        """(clients, classes) sample counts over train and validation."""
        return np.stack([np.bincount(labels[self.client_indices(k)], minlength=classes)
                         for k in range(self.num_clients)])


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer block sizes proportional to ``proportions`` summing to ``total``.

    Floors first, then hands the leftover units to the largest fractional
    parts (lowest index first on ties).
    """
    quotas = np.asarray(proportions, dtype=np.float64) * total
    sizes = np.floor(quotas).astype(np.int64)
    short = total - int(sizes.sum())
    if short > 0:
        order = np.argsort(-(quotas - sizes), kind="stable")
        sizes[order[:short]] += 1
    elif short < 0:
        raise PartitionError("proportions sum above one")
    return sizes


def _dirichlet_attempt(labels, classes, spec, rng):
    n = spec.num_clients
    pools = [[] for _ in range(n)]
    for k in range(classes):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        draws = rng.gamma(spec.beta, 1.0, size=n)
        if not draws.sum() > 0:
            return None
        sizes = largest_remainder(draws / draws.sum(), idx.size)
        for j, chunk in enumerate(np.split(idx, np.cumsum(sizes)[:-1])):
            pools[j].append(chunk)
    train, val = [], []
    for j in range(n):
        pool = rng.permutation(np.concatenate(pools[j]).astype(np.int64))
        n_val = int(np.floor(spec.validation_fraction * pool.size))
        val.append(np.sort(pool[:n_val]))
        train.append(np.sort(pool[n_val:]))
    if any(t.size == 0 for t in train):
        return None
    return Partition(train, val)


def dirichlet_partition(ds, spec: PartitionSpec) -> Partition:
    """Label-skewed split: per class, Dirichlet(beta) shares of its samples.

    Each attempt uses its own stream ``default_rng([seed, attempt])``; a draw
    leaving some client without training data is redrawn.
    """
    labels = ds.labels if isinstance(ds, LabeledDataset) else np.asarray(ds)
    classes = ds.class_count if isinstance(ds, LabeledDataset) else int(labels.max()) + 1
    for attempt in range(MAX_PARTITION_RETRIES):
        rng = np.random.default_rng([spec.seed, attempt])
        part = _dirichlet_attempt(labels, classes, spec, rng)
        if part is not None:
            return part
    raise PartitionError(
        f"no partition with nonempty training shards after {MAX_PARTITION_RETRIES} draws "
        f"(clients={spec.num_clients}, beta={spec.beta}, samples={len(labels)})")


def chi_square_distance(hist: np.ndarray) -> float:
    """Mean over clients of chi^2(client label distribution, global distribution)."""
    hist = np.asarray(hist, dtype=np.float64)
    glob = hist.sum(axis=0) / hist.sum()
    keep = glob > 0
    rows = hist[hist.sum(axis=1) > 0]
    local = rows / rows.sum(axis=1, keepdims=True)
    return float(np.mean((((local - glob) ** 2)[:, keep] / glob[keep]).sum(axis=1)))
