"""Local losses F_k, their gradients, and smoothness / strong-convexity constants.

Two linear models are supported:

* ``ridge``: ``f(a, b; w) = 0.5 * (a @ w - b) ** 2``
* ``logistic``: binary cross-entropy of ``sigmoid(a @ w)`` against ``b in {0, 1}``

Both carry the penalty ``(reg / 2) * ||w||^2``, applied in full on every
(stochastic) gradient so that the mini-batch gradient stays unbiased.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "KINDS",
    "Dataset",
    "ObjectiveSpec",
    "ConvexityConstants",
    "ObjectiveError",
    "loss",
    "full_gradient",
    "stochastic_gradient",
    "weighted_gradient",
    "constants",
    "global_loss",
    "global_gradient",
    "sigmoid",
]

KINDS = ("ridge", "logistic")


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Samples ``features`` (m x n) with ``labels`` (m,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float).reshape(-1)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2:
            raise ObjectiveError(f"features must be 2-D, got shape {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise ObjectiveError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if x.shape[0] < 1:
            raise ObjectiveError("dataset must hold at least one sample")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return np.array_equal(self.features, other.features) and np.array_equal(self.labels, other.labels)

    def __hash__(self) -> int:
        return hash((self.features.tobytes(), self.labels.tobytes()))

    @classmethod
    def concatenate(cls, parts: Sequence["Dataset"]) -> "Dataset":
        return cls(np.vstack([p.features for p in parts]), np.concatenate([p.labels for p in parts]))


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "ridge"
    reg: float = 0.1
    dim: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ObjectiveError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if not self.reg >= 0:
            raise ObjectiveError(f"regularization must be >= 0, got {self.reg}")

    @property
    def strongly_convex(self) -> bool:
        return self.reg > 0


@dataclass(frozen=True)
class ConvexityConstants:
    L: float
    mu: float
    L_k: tuple[float, ...]
    mu_k: tuple[float, ...]

    @property
    def strongly_convex(self) -> bool:
        return self.mu > 0

    @property
    def condition_number(self) -> float:
        return self.L / self.mu if self.mu > 0 else float("inf")


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _check(spec: ObjectiveSpec, w: np.ndarray, data: Dataset) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != data.dim:
        raise ObjectiveError(f"parameter has length {w.shape[0]} but features have {data.dim} columns")
    if spec.dim is not None and spec.dim != data.dim:
        raise ObjectiveError(f"objective expects dimension {spec.dim}, data has {data.dim}")
    if spec.kind == "logistic" and not np.all((data.labels == 0) | (data.labels == 1)):
        raise ObjectiveError("logistic labels must be 0 or 1")
    return w


def _residual(kind: str, x: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    z = x @ w
    if kind == "ridge":
        return z - y
    return sigmoid(z) - y


def loss(spec: ObjectiveSpec, w, data: Dataset) -> float:
    """F_k(w): mean sample loss plus ``reg/2 * ||w||^2``."""
    w = _check(spec, w, data)
    z = data.features @ w
    if spec.kind == "ridge":
        value = 0.5 * np.mean((z - data.labels) ** 2)
    else:
        # log(1 + e^z) - b z, overflow-free for large |z|
        value = np.mean(np.logaddexp(0.0, z) - data.labels * z)
    return float(value + 0.5 * spec.reg * (w @ w))


def full_gradient(spec: ObjectiveSpec, w, data: Dataset) -> np.ndarray:
    w = _check(spec, w, data)
    r = _residual(spec.kind, data.features, data.labels, w)
    return data.features.T @ r / data.m + spec.reg * w


def stochastic_gradient(spec: ObjectiveSpec, w, data: Dataset, batch) -> np.ndarray:
    """Mean per-sample gradient over ``batch`` plus the full regularizer."""
    w = _check(spec, w, data)
    batch = np.asarray(batch, dtype=np.intp).reshape(-1)
    if batch.size == 0:
        raise ObjectiveError("batch must be nonempty")
    if batch.min() < 0 or batch.max() >= data.m:
        raise ObjectiveError(f"batch index out of range for {data.m} samples")
    x = data.features[batch]
    r = _residual(spec.kind, x, data.labels[batch], w)
    return x.T @ r / batch.size + spec.reg * w


def weighted_gradient(g: np.ndarray, m_k: int, m: int) -> np.ndarray:
    """Scale a client gradient by its data share ``m_k / m``."""
    return (m_k / m) * g


def constants(spec: ObjectiveSpec, data: Dataset | Sequence[Dataset]) -> ConvexityConstants:
    """Per-client L_k, mu_k and the global L = max L_k, mu = min mu_k.

    Accepts one dataset or a list of client shards.
    """
    shards = [data] if isinstance(data, Dataset) else list(data)
    if not shards:
        raise ObjectiveError("no datasets given")
    L_k, mu_k = [], []
    for shard in shards:
        gram = shard.features.T @ shard.features / shard.m
        eig = np.linalg.eigvalsh(0.5 * (gram + gram.T))
        lo, hi = max(float(eig[0]), 0.0), float(eig[-1])
        if spec.kind == "ridge":
            L_k.append(hi + spec.reg)
            mu_k.append(lo + spec.reg)
        else:
            L_k.append(hi / 4.0 + spec.reg)
            mu_k.append(spec.reg)
    return ConvexityConstants(L=max(L_k), mu=min(mu_k), L_k=tuple(L_k), mu_k=tuple(mu_k))


def _shares(shards: Sequence[Dataset]) -> np.ndarray:
    sizes = np.array([s.m for s in shards], dtype=float)
    return sizes / sizes.sum()


def global_loss(spec: ObjectiveSpec, w, shards: Sequence[Dataset]) -> float:
    """F(w) = sum_k (m_k / m) F_k(w)."""
    return float(sum(p * loss(spec, w, s) for p, s in zip(_shares(shards), shards)))


def global_gradient(spec: ObjectiveSpec, w, shards: Sequence[Dataset]) -> np.ndarray:
    out = np.zeros(shards[0].dim)
    for p, s in zip(_shares(shards), shards):
        out += p * full_gradient(spec, w, s)
    return out
