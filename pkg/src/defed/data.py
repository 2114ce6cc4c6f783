"""Synthetic datasets, CSV ingestion and uniform client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .objective import Dataset

__all__ = [
    "DataError",
    "PartitionPlan",
    "polynomial_features",
    "regression_target",
    "generate_regression",
    "generate_classification",
    "load_csv_dataset",
    "save_csv_dataset",
    "partition_uniform",
]


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionPlan:
    K: int
    shard_sizes: tuple[int, ...]
    assignment: tuple[tuple[int, ...], ...]
    seed: int | None


def polynomial_features(x, degree: int = 1) -> np.ndarray:
    """Map scalar inputs to ``[1, x, ..., x**degree]``."""
    if degree < 1:
        raise DataError(f"feature degree must be >= 1, got {degree}")
    x = np.asarray(x, dtype=float).reshape(-1)
    return np.vander(x, degree + 1, increasing=True)


def regression_target(x):
    return 0.5 * np.sin(x) + 1.0


def generate_regression(
    n_samples: int,
    lo: float = -6.0,
    hi: float = 6.0,
    noise_std: float = 0.1,
    seed: int | None = 0,
    degree: int = 1,
) -> Dataset:
    """Noisy samples of ``0.5 sin(x) + 1`` with x uniform on ``[lo, hi]``."""
    if n_samples < 1:
        raise DataError(f"n_samples must be >= 1, got {n_samples}")
    if not lo < hi:
        raise DataError(f"need lo < hi, got [{lo}, {hi}]")
    if not noise_std >= 0:
        raise DataError(f"noise_std must be >= 0, got {noise_std}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, size=n_samples)
    y = regression_target(x) + noise_std * rng.standard_normal(n_samples)
    return Dataset(polynomial_features(x, degree), y)


def generate_classification(n_samples: int, dim: int = 2, margin: float = 2.0, seed: int | None = 0) -> Dataset:
    """Two balanced unit-variance Gaussian blobs centred at ``+-margin * u``.

    ``u`` is a random unit vector; label 1 sits at ``+margin * u``.
    """
    if n_samples < 2 or n_samples % 2:
        raise DataError(f"n_samples must be a positive even number, got {n_samples}")
    if dim < 1:
        raise DataError(f"dim must be >= 1, got {dim}")
    if not margin > 0:
        raise DataError(f"margin must be > 0, got {margin}")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    half = n_samples // 2
    labels = np.repeat([1.0, 0.0], half)
    centers = np.where(labels[:, None] == 1.0, margin * u, -margin * u)
    x = centers + rng.standard_normal((n_samples, dim))
    order = rng.permutation(n_samples)
    return Dataset(x[order], labels[order])


def load_csv_dataset(path: str | Path, label_column: int = 0) -> Dataset:
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric cell in {row!r}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0])
    for i, r in enumerate(rows, start=1):
        if len(r) != width:
            raise DataError(f"{path}: row {i} has {len(r)} fields, expected {width}")
    if width < 2:
        raise DataError(f"{path}: need at least one feature column and one label column")
    if not -width <= label_column < width:
        raise DataError(f"label column {label_column} out of range for {width} columns")
    table = np.array(rows)
    col = label_column % width
    return Dataset(np.delete(table, col, axis=1), table[:, col])


def save_csv_dataset(data: Dataset, path: str | Path, label_column: int = 0) -> None:
    table = np.insert(data.features, label_column, data.labels, axis=1)
    with open(path, "w", newline="") as fh:
        for row in table:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def partition_uniform(data: Dataset, K: int, seed: int | None = 0) -> tuple[list[Dataset], PartitionPlan]:
    """Shuffle and split into K shards whose sizes differ by at most one."""
    if K < 1:
        raise DataError(f"K must be >= 1, got {K}")
    if data.m < K:
        raise DataError(f"cannot split {data.m} samples across {K} clients")
    perm = np.random.default_rng(seed).permutation(data.m)
    parts = np.array_split(perm, K)
    shards = [data.subset(p) for p in parts]
    plan = PartitionPlan(
        K=K,
        shard_sizes=tuple(len(p) for p in parts),
        assignment=tuple(tuple(int(i) for i in p) for p in parts),
        seed=seed,
    )
    return shards, plan
