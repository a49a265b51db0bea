"""Synthetic labeled point clouds and label-skew partitioning.

Partitioning works label by label.  In skew mode, with skew factor
S = 2^(level - 1), the first K-1 partitions each receive floor(N_l / (S + K - 1))
samples of label l and the last partition receives the remainder, so higher
levels concentrate every label in the final shard.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

PARTITION_MODES = ("iid", "skew", "non_iid")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Points of shape (n, d) with integer labels in [0, L)."""

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if points.ndim != 2:
            raise ValueError(f"points must be (n, d), got shape {points.shape}")
        if labels.ndim != 1 or len(labels) != len(points):
            raise ValueError("labels must be one integer per point")
        if len(labels) and labels.min() < 0:
            raise ValueError("labels must be >= 0")
        for arr in (points, labels):
            if arr.flags.writeable:
                arr.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.points[idx], self.labels[idx])


def circle_centers(count: int, radius: float = 1.0) -> np.ndarray:
    """``count`` points equally spaced on a circle of the given radius."""
    if count < 1:
        raise ValueError(f"need at least one center, got {count}")
    angles = 2.0 * np.pi * np.arange(count) / count
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


def make_gaussian_mixture(n: int, centers, std: float, seed: int) -> LabeledDataset:
    """n points split evenly over the centers; remainders go to the lowest labels.

    The component index is the label.  Deterministic for a fixed seed.
    """
    centers = np.asarray(centers, dtype=float)
    if centers.size == 0:
        raise ValueError("centers must be nonempty")
    if centers.ndim != 2:
        raise ValueError(f"centers must be (L, d), got shape {centers.shape}")
    num_components = len(centers)
    if n < num_components:
        raise ValueError(f"need n >= {num_components} points, got {n}")
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    base, rem = divmod(n, num_components)
    rng = np.random.default_rng(seed)
    points, labels = [], []
    for label in range(num_components):
        count = base + (1 if label < rem else 0)
        points.append(centers[label] + std * rng.standard_normal((count, centers.shape[1])))
        labels.append(np.full(count, label, dtype=np.int64))
    return LabeledDataset(np.concatenate(points), np.concatenate(labels))


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset into client shards."""

    partitions: int
    mode: str = "iid"
    skew_level: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.partitions < 1:
            raise ConfigError(f"partitions must be >= 1, got {self.partitions}")
        if self.mode not in PARTITION_MODES:
            raise ConfigError(
                f"mode must be one of {PARTITION_MODES}, got {self.mode!r}"
            )
        if self.skew_level < 1:
            raise ConfigError(f"skew_level must be >= 1, got {self.skew_level}")

    @property
    def skew_factor(self) -> int:
        return 2 ** (self.skew_level - 1)


def partition_assignment(data: LabeledDataset, spec: PartitionSpec) -> np.ndarray:
    """Partition index per point; every mode operates label by label."""
    num_parts = spec.partitions
    num_labels = data.num_classes
    assign = np.full(len(data), -1, dtype=np.int64)
    if spec.mode == "non_iid":
        if num_labels < num_parts:
            raise ConfigError(
                f"non_iid needs at least as many labels as partitions: "
                f"{num_labels} labels < {num_parts} partitions"
            )
        # Whole labels map onto partitions round-robin.
        return data.labels % num_parts
    rng = np.random.default_rng(spec.seed)
    for label in range(num_labels):
        idx = np.flatnonzero(data.labels == label)
        idx = idx[rng.permutation(idx.size)]
        n_l = idx.size
        if spec.mode == "iid":
            base, rem = divmod(n_l, num_parts)
            counts = [base + (1 if p < rem else 0) for p in range(num_parts)]
        else:
            share = n_l // (spec.skew_factor + num_parts - 1)
            counts = [share] * (num_parts - 1) + [n_l - share * (num_parts - 1)]
        stops = np.cumsum(counts)
        start = 0
        for p in range(num_parts):
            assign[idx[start : stops[p]]] = p
            start = stops[p]
    return assign


def partition(data: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    """Split into ``spec.partitions`` disjoint shards whose union is the dataset."""
    assign = partition_assignment(data, spec)
    return [data.subset(np.flatnonzero(assign == p)) for p in range(spec.partitions)]


@dataclass(frozen=True, eq=False)
class SkewStats:
    """Per-partition label histograms and the largest/smallest shard size ratio."""

    histograms: np.ndarray
    size_ratio: float


def skew_stats(shards: list[LabeledDataset]) -> SkewStats:
    if not shards:
        raise ValueError("shards must be nonempty")
    num_labels = max((s.num_classes for s in shards), default=0)
    hist = np.zeros((len(shards), num_labels), dtype=np.int64)
    for i, shard in enumerate(shards):
        values, counts = np.unique(shard.labels, return_counts=True)
        hist[i, values] = counts
    sizes = hist.sum(axis=1)
    ratio = float(sizes.max() / sizes.min()) if sizes.min() > 0 else float("inf")
    return SkewStats(histograms=hist, size_ratio=ratio)


def save_dataset_csv(path: str | Path, data: LabeledDataset) -> None:
    """Columns x1..xd, label."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"x{i + 1}" for i in range(data.dim)] + ["label"])
        for point, label in zip(data.points, data.labels):
            writer.writerow([repr(float(v)) for v in point] + [int(label)])


def load_dataset_csv(path: str | Path) -> LabeledDataset:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        dim = len(header) - 1
        points, labels = [], []
        for row in reader:
            points.append([float(v) for v in row[:dim]])
            labels.append(int(row[dim]))
    return LabeledDataset(np.asarray(points, dtype=float), np.asarray(labels))


def save_assignment_csv(path: str | Path, assignment: np.ndarray) -> None:
    """Columns point_index, partition."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["point_index", "partition"])
        for i, p in enumerate(assignment):
            writer.writerow([i, int(p)])
