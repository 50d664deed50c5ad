"""Datasets, client partitioning, and evaluation metrics.

Covers the CIFAR-10 binary format (load and save, byte-exact round
trip), synthetic stand-in tasks for desk-scale runs, uniform and
Dirichlet client splits, and the two reporting metrics (accuracy and
mean per-label ROC-AUC).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (BadParams, DegenerateLabel, DegenerateLabelWarning,
                     FileSizeError, LabelError, ShapeError, TooFewSamples)

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
TASKS = ("single_label", "multi_label")


@dataclass
class Dataset:
    """Immutable image set; images live in [0, 1] with layout (N, C, H, W)."""

    images: np.ndarray
    labels: np.ndarray
    task: str
    class_count: int

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ValueError(f"images must be (N, C, H, W) with N > 0, got {self.images.shape}")
        n = len(self.images)
        if self.task == "single_label":
            if self.labels.shape != (n,):
                raise ValueError(f"labels must be ({n},), got {self.labels.shape}")
            if len(self.labels) and (self.labels.min() < 0
                                     or self.labels.max() >= self.class_count):
                raise ValueError(f"labels outside [0, {self.class_count})")
        else:
            if self.labels.shape != (n, self.class_count):
                raise ValueError(f"label matrix must be ({n}, {self.class_count}), "
                                 f"got {self.labels.shape}")

    @property
    def n(self) -> int:
        return len(self.images)

    def take(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices],
                       self.task, self.class_count)


@dataclass
class Shard:
    """Index view into a dataset; the client-side unit of data."""

    dataset: Dataset
    indices: np.ndarray

    @property
    def n(self) -> int:
        return len(self.indices)

    def batch(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices[positions]
        return self.dataset.images[idx], self.dataset.labels[idx]

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels[self.indices]


@dataclass(frozen=True)
class SplitSpec:
    mode: str  # "uniform" | "dirichlet"
    clients: int
    data_fraction: float = 1.0
    alpha: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("uniform", "dirichlet"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.clients < 1:
            raise ValueError(f"clients must be >= 1, got {self.clients}")
        if not (0.0 < self.data_fraction <= 1.0):
            raise ValueError(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        if self.mode == "dirichlet" and (self.alpha is None or self.alpha <= 0):
            raise ValueError(f"dirichlet mode needs alpha > 0, got {self.alpha}")


# -- CIFAR-10 binary format ---------------------------------------------------

def load_cifar10(path) -> Dataset:
    """Parse CIFAR-10 binary batch files (a single file or a directory).

    Each record is 3073 bytes: one label byte in [0, 9], then 3072 pixel
    bytes channel-major (1024 R, 1024 G, 1024 B), row-major per channel.
    """
    path = Path(path)
    files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
    if not files:
        raise FileSizeError(f"{path}: no .bin batch files found")
    all_labels, all_images = [], []
    for f in files:
        raw = np.frombuffer(f.read_bytes(), dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
            raise FileSizeError(
                f"{f}: size {raw.size} is not a positive multiple of {CIFAR_RECORD_BYTES}")
        records = raw.reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        if labels.max() > 9:
            raise LabelError(f"{f}: label byte {labels.max()} > 9")
        all_labels.append(labels.astype(np.int64))
        all_images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(all_images).astype(np.float32) / 255.0
    return Dataset(images, np.concatenate(all_labels), "single_label", 10)


def save_cifar10(dataset: Dataset, path) -> None:
    """Serialize to the binary batch layout; inverse of load_cifar10."""
    if dataset.task != "single_label" or dataset.images.shape[1:] != (3, 32, 32):
        raise BadParams("only 10-class (3, 32, 32) datasets fit the CIFAR-10 layout")
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8).reshape(dataset.n, -1)
    records = np.concatenate(
        [dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(records.tobytes())


# -- synthetic tasks ----------------------------------------------------------

_SIGNAL_AMPLITUDE = 0.25
_MULTILABEL_NOISE = 0.12


def _smooth_templates(rng: np.random.Generator, count: int,
                      shape: tuple[int, int, int]) -> np.ndarray:
    """Per-class patterns built from a coarse grid upsampled 4x, unit std."""
    c, h, w = shape
    coarse = rng.normal(0.0, 1.0, (count, c, math.ceil(h / 4), math.ceil(w / 4)))
    full = np.kron(coarse, np.ones((1, 1, 4, 4)))[:, :, :h, :w]
    full -= full.mean(axis=(1, 2, 3), keepdims=True)
    full /= full.std(axis=(1, 2, 3), keepdims=True)
    return full


def _check_shape(shape) -> tuple[int, int, int]:
    shape = tuple(int(v) for v in shape)
    if len(shape) != 3 or any(v < 1 for v in shape):
        raise BadParams(f"shape must be (C, H, W) positive, got {shape}")
    return shape


def synth_classify(n: int, classes: int, shape=(3, 16, 16), margin: float = 1.0,
                   seed: int = 0) -> Dataset:
    """Class-template images plus Gaussian noise with std amplitude/margin.

    Larger margin means cleaner images; in the margin -> infinity limit a
    nearest-template classifier is exact.
    """
    shape = _check_shape(shape)
    if classes < 2 or n < classes:
        raise BadParams(f"need n >= classes >= 2, got n={n}, classes={classes}")
    if not (margin > 0):
        raise BadParams(f"margin must be positive, got {margin}")
    rng = np.random.default_rng(seed)
    templates = _smooth_templates(rng, classes, shape)
    counts = [n // classes + (1 if i < n % classes else 0) for i in range(classes)]
    labels = np.repeat(np.arange(classes), counts)
    rng.shuffle(labels)
    sigma = _SIGNAL_AMPLITUDE / margin
    images = 0.5 + _SIGNAL_AMPLITUDE * templates[labels]
    images = images + rng.normal(0.0, sigma, images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), "single_label", classes)


def synth_multilabel(n: int, labels_k: int, shape=(3, 16, 16),
                     seed: int = 0) -> Dataset:
    """Superposition task: image = sum of active-label templates + noise.

    Label bits are independent Bernoulli(0.3); an all-zero row leaves
    pure noise around the mid-gray level.
    """
    shape = _check_shape(shape)
    if labels_k < 2 or n < 1:
        raise BadParams(f"need labels_k >= 2 and n >= 1, got {labels_k}, {n}")
    rng = np.random.default_rng(seed)
    templates = _smooth_templates(rng, labels_k, shape)
    labels = (rng.random((n, labels_k)) < 0.3).astype(np.int64)
    mix = np.tensordot(labels.astype(np.float64), templates, axes=(1, 0))
    images = 0.5 + _SIGNAL_AMPLITUDE * mix
    images = images + rng.normal(0.0, _MULTILABEL_NOISE, images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, "multi_label", labels_k)


def train_test_split(dataset: Dataset, test_n: int, seed: int = 0
                     ) -> tuple[Dataset, Dataset]:
    """Shuffled disjoint train/test cut of one dataset."""
    if not (0 < test_n < dataset.n):
        raise BadParams(f"test_n must be in (0, {dataset.n}), got {test_n}")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    return dataset.take(np.sort(perm[test_n:])), dataset.take(np.sort(perm[:test_n]))


# -- client splits ------------------------------------------------------------

def split(dataset: Dataset, spec: SplitSpec, test_dataset: Dataset | None = None):
    """Partition a dataset into per-client shards.

    uniform: shuffle, keep data_fraction of the samples, deal them into
    C near-equal shards (sizes differ by at most one).  dirichlet: draw
    per-client class proportions from Dir(alpha) and allocate each
    class's samples by those column weights; the test set is split with
    the same proportions so skew-matched evaluation is possible, while
    the caller retains the full balanced set.

    Returns the list of train shards, or (train_shards, test_shards)
    when ``test_dataset`` is given.
    """
    if spec.mode == "uniform":
        shards = _split_uniform(dataset, spec.clients, spec.data_fraction, spec.seed)
        if test_dataset is None:
            return shards
        test_shards = _split_uniform(test_dataset, spec.clients, 1.0,
                                     spec.seed + 1)
        return shards, test_shards
    if dataset.task != "single_label":
        raise BadParams("dirichlet mode needs single-label data")
    return _split_dirichlet(dataset, test_dataset, spec)


def _split_uniform(dataset: Dataset, clients: int, fraction: float,
                   seed: int) -> list[Shard]:
    rng = np.random.default_rng(seed)
    kept = math.floor(fraction * dataset.n)
    if kept < clients:
        raise TooFewSamples(f"{kept} samples cannot cover {clients} clients")
    picked = rng.permutation(dataset.n)[:kept]
    sizes = [kept // clients + (1 if i < kept % clients else 0) for i in range(clients)]
    shards, start = [], 0
    for size in sizes:
        shards.append(Shard(dataset, np.sort(picked[start:start + size])))
        start += size
    return shards


def _split_dirichlet(dataset: Dataset, test_dataset: Dataset | None,
                     spec: SplitSpec):
    rng = np.random.default_rng(spec.seed)
    classes = dataset.class_count
    proportions = rng.dirichlet(np.full(classes, spec.alpha), size=spec.clients)
    kept = math.floor(spec.data_fraction * dataset.n)
    picked = rng.permutation(dataset.n)[:kept]
    train_parts = _allocate_by_class(dataset, picked, proportions, rng)
    if any(len(p) == 0 for p in train_parts):
        raise TooFewSamples("a client received an empty dirichlet shard")
    train_shards = [Shard(dataset, np.sort(p)) for p in train_parts]
    if test_dataset is None:
        return train_shards
    test_parts = _allocate_by_class(test_dataset, np.arange(test_dataset.n),
                                    proportions, rng)
    test_shards = [Shard(test_dataset, np.sort(p)) for p in test_parts]
    return train_shards, test_shards


def _allocate_by_class(dataset: Dataset, picked: np.ndarray,
                       proportions: np.ndarray, rng: np.random.Generator
                       ) -> list[np.ndarray]:
    """Deal each class's samples to clients by the class's column weights."""
    clients = len(proportions)
    parts: list[list[np.ndarray]] = [[] for _ in range(clients)]
    labels = dataset.labels[picked]
    for cls in range(dataset.class_count):
        members = picked[labels == cls]
        if len(members) == 0:
            continue
        members = rng.permutation(members)
        weights = proportions[:, cls]
        weights = weights / weights.sum()
        cuts = (np.cumsum(weights) * len(members)).astype(int)[:-1]
        for client, chunk in enumerate(np.split(members, cuts)):
            parts[client].append(chunk)
    return [np.concatenate(p) if p else np.empty(0, dtype=np.int64) for p in parts]


def write_split_manifest(shards: list[Shard], path) -> None:
    """Record per-client sample indices as JSON for reproducibility."""
    doc = {"clients": [{"client": i, "indices": shard.indices.tolist()}
                       for i, shard in enumerate(shards)]}
    Path(path).write_text(json.dumps(doc, indent=2))


# -- metrics ------------------------------------------------------------------

def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax matches; ties go to the lowest class."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"bad shapes: logits {logits.shape}, labels {labels.shape}")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their group's average rank."""
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    high = np.cumsum(counts)
    return (high - (counts - 1) / 2.0)[inverse]


def mean_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean per-label ROC-AUC: (concordant + 0.5 * tied) / (pos * neg).

    Single-class columns are skipped with a warning; if every column is
    degenerate there is no defined value and DegenerateLabel is raised.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ShapeError(f"bad shapes: scores {scores.shape}, labels {labels.shape}")
    aucs = []
    for col in range(scores.shape[1]):
        y = labels[:, col]
        positives = int((y == 1).sum())
        negatives = int((y == 0).sum())
        if positives == 0 or negatives == 0:
            warnings.warn(f"label column {col} is single-class; skipped",
                          DegenerateLabelWarning)
            continue
        ranks = _average_ranks(scores[:, col])
        pos_rank_sum = ranks[y == 1].sum()
        aucs.append((pos_rank_sum - positives * (positives + 1) / 2.0)
                    / (positives * negatives))
    if not aucs:
        raise DegenerateLabel("every label column is single-class")
    return float(np.mean(aucs))
