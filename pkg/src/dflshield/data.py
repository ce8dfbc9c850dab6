"""Toy datasets and CSV IO.

Two bundled sources: a synthetic Gaussian-blob classification problem
generated deterministically from a seed, and a small handwritten-digit
subset shipped with the package. Dataset files use one CSV schema:
``label,f0,f1,...``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    """Feature matrix plus integer class labels."""

    features: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    split_ratio: float = 0.8

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} feature rows vs {len(self.labels)} labels")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices], self.split_ratio)

    def split(self, seed: int) -> tuple["Dataset", "Dataset"]:
        """Deterministic train/test split keyed by ``seed``."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        cut = max(1, min(len(self) - 1, int(round(len(self) * self.split_ratio))))
        return self.subset(order[:cut]), self.subset(order[cut:])

    def shard(self, index: int, count: int, seed: int) -> "Dataset":
        """One of ``count`` near-equal shards of a seeded shuffle of the data."""
        if not 0 <= index < count:
            raise ValueError(f"shard index {index} out of range for {count} shards")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        return self.subset(np.sort(order[index::count]))


def make_blobs(
    samples: int,
    classes: int = 4,
    features: int = 2,
    seed: int = 0,
    spread: float = 0.9,
    radius: float = 3.0,
) -> Dataset:
    """Gaussian clusters with centers drawn deterministically from ``seed``.

    For two features the centers sit on a circle of the given radius; in
    higher dimensions they are drawn from a scaled normal.
    """
    if samples < classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    if features == 2:
        angles = 2 * np.pi * np.arange(classes) / classes
        centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    else:
        centers = radius * rng.standard_normal((classes, features)) / np.sqrt(features)
    labels = rng.integers(0, classes, size=samples)
    # Guarantee every class appears at least once.
    labels[:classes] = np.arange(classes)
    feats = centers[labels] + spread * rng.standard_normal((samples, features))
    order = rng.permutation(samples)
    return Dataset(feats[order], labels[order])


def load_digits_small(split_ratio: float = 0.8) -> Dataset:
    """Bundled 360-sample digit subset (10 classes, 64 gray-level features)."""
    with resources.files("dflshield.assets").joinpath("digits_small.csv").open("r") as fh:
        ds = _read_csv(fh)
    ds.split_ratio = split_ratio
    # Gray levels are 0..16; scale into a friendlier range for the MLP.
    ds.features /= 16.0
    return ds


def load_dataset_csv(path: str | Path) -> Dataset:
    with open(path, "r", newline="") as fh:
        return _read_csv(fh)


def save_dataset_csv(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(ds.num_features)])
        for x, y in zip(ds.features, ds.labels):
            writer.writerow([int(y)] + [repr(float(v)) for v in x])


def _read_csv(fh) -> Dataset:
    reader = csv.reader(fh)
    header = next(reader, None)
    if not header or header[0] != "label":
        raise ValueError("dataset CSV must start with a 'label,f0,...' header")
    feats, labels = [], []
    for row in reader:
        if not row:
            continue
        labels.append(int(row[0]))
        feats.append([float(v) for v in row[1:]])
    if not feats:
        raise ValueError("dataset CSV has no rows")
    return Dataset(np.array(feats), np.array(labels))
