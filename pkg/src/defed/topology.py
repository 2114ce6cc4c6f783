"""Communication topologies as symmetric doubly stochastic mixing matrices."""

from __future__ import annotations

import csv
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MixingMatrix",
    "TopologyReport",
    "TopologyError",
    "TopologyParameterError",
    "TooFewClientsError",
    "OddDegreeError",
    "DegreeTooSmallError",
    "DegreeTooLargeError",
    "TopologyParseError",
    "TopologyValidationError",
    "build_regular_graph",
    "build_complete_graph",
    "load_matrix",
    "save_matrix",
    "validate",
    "spectral_norm",
]

CONSTRUCTED_TOL = 1e-12
FILE_TOL = 1e-9


class TopologyError(ValueError):
    """Base class for topology failures."""


class TopologyParameterError(TopologyError):
    pass


class TooFewClientsError(TopologyParameterError):
    pass


class OddDegreeError(TopologyParameterError):
    pass


class DegreeTooSmallError(TopologyParameterError):
    pass


class DegreeTooLargeError(TopologyParameterError):
    pass


class TopologyParseError(TopologyError):
    pass


class TopologyValidationError(TopologyError):
    """Raised when a matrix fails validation; the report is attached."""

    def __init__(self, message: str, report: "TopologyReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TopologyReport:
    symmetric: bool
    row_stochastic: bool
    max_row_sum_deviation: float
    nonnegative: bool
    connected: bool
    degree_per_node: list[int]
    lam: float | None = None

    @property
    def ok(self) -> bool:
        return self.symmetric and self.row_stochastic and self.nonnegative and self.connected

    def problems(self) -> list[str]:
        out = []
        if not self.symmetric:
            out.append("matrix is not symmetric")
        if not self.row_stochastic:
            out.append(f"rows do not sum to 1 (max deviation {self.max_row_sum_deviation:.3g})")
        if not self.nonnegative:
            out.append("entries outside [0, 1]")
        if not self.connected:
            out.append("support graph is disconnected")
        return out

    def to_dict(self) -> dict:
        return {
            "symmetric": self.symmetric,
            "row_stochastic": self.row_stochastic,
            "max_row_sum_deviation": self.max_row_sum_deviation,
            "nonnegative": self.nonnegative,
            "connected": self.connected,
            "degree_per_node": list(self.degree_per_node),
            "lambda": self.lam,
        }


def _is_connected(weights: np.ndarray) -> bool:
    k = weights.shape[0]
    adj = weights > 0
    np.fill_diagonal(adj, False)
    seen = np.zeros(k, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adj[i] & ~seen):
            seen[j] = True
            queue.append(int(j))
    return bool(seen.all())


def _lambda_of(weights: np.ndarray) -> float:
    k = weights.shape[0]
    centered = weights - np.full((k, k), 1.0 / k)
    # Symmetrize away round-off so eigvalsh sees an exactly symmetric input.
    centered = 0.5 * (centered + centered.T)
    return float(np.max(np.abs(np.linalg.eigvalsh(centered))))


def _check(weights: np.ndarray, tol: float) -> TopologyReport:
    k = weights.shape[0]
    symmetric = bool(np.all(np.abs(weights - weights.T) <= tol))
    dev = float(np.max(np.abs(weights.sum(axis=1) - 1.0)))
    nonneg = bool(np.all(weights >= -tol) and np.all(weights <= 1.0 + tol))
    off = (weights > 0) & ~np.eye(k, dtype=bool)
    degrees = [int(d) for d in off.sum(axis=1)]
    return TopologyReport(
        symmetric=symmetric,
        row_stochastic=dev <= tol,
        max_row_sum_deviation=dev,
        nonnegative=nonneg,
        connected=_is_connected(weights),
        degree_per_node=degrees,
    )


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """Validated symmetric doubly stochastic matrix over ``size`` clients.

    The spectral norm of ``W - 11^T/K`` is computed on first access and cached.
    Construction raises :class:`TopologyValidationError` for invalid input.
    """

    weights: np.ndarray
    name: str = "custom"
    tol: float = CONSTRUCTED_TOL
    _cache: dict = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=float, copy=True)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise TopologyValidationError(
                f"mixing matrix must be square, got shape {w.shape}", report=None
            )
        if w.shape[0] < 2:
            raise TooFewClientsError(f"need at least 2 clients, got {w.shape[0]}")
        report = _check(w, self.tol)
        if not report.ok:
            raise TopologyValidationError("invalid mixing matrix: " + "; ".join(report.problems()), report)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def spectral_norm(self) -> float:
        with self._lock:
            if "lam" not in self._cache:
                self._cache["lam"] = _lambda_of(self.weights)
            return self._cache["lam"]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MixingMatrix):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)

    def __hash__(self) -> int:
        return hash(self.weights.tobytes())


def build_regular_graph(K: int, l: int) -> MixingMatrix:
    """Circulant l-regular ring: client i talks to the l/2 nearest indices on each side.

    Every nonzero entry, including the diagonal, equals ``1/(l+1)``.
    """
    if K < 3:
        raise TooFewClientsError(f"regular graph needs K >= 3, got {K}")
    if l % 2 != 0:
        raise OddDegreeError(f"degree l must be even for a circulant ring, got {l}")
    if l < 2:
        raise DegreeTooSmallError(f"degree l must be >= 2, got {l}")
    if l > K - 1:
        raise DegreeTooLargeError(f"degree l must be <= K - 1 = {K - 1}, got {l}")
    w = np.zeros((K, K))
    value = 1.0 / (l + 1)
    idx = np.arange(K)
    for offset in range(-(l // 2), l // 2 + 1):
        w[idx, (idx + offset) % K] = value
    return MixingMatrix(w, name=f"regular(K={K}, l={l})")


def build_complete_graph(K: int) -> MixingMatrix:
    if K < 2:
        raise TooFewClientsError(f"complete graph needs K >= 2, got {K}")
    return MixingMatrix(np.full((K, K), 1.0 / K), name=f"complete(K={K})")


def validate(W, tol: float = CONSTRUCTED_TOL) -> TopologyReport:
    """Check a matrix without raising; lambda is filled only when every check passes."""
    if isinstance(W, MixingMatrix):
        w = W.weights
    else:
        w = np.asarray(W, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
        return TopologyReport(False, False, float("inf"), False, False, [])
    report = _check(w, tol)
    if report.ok and w.shape[0] >= 2:
        lam = W.spectral_norm if isinstance(W, MixingMatrix) else _lambda_of(w)
        report = TopologyReport(**{**report.__dict__, "lam": lam})
    return report


def spectral_norm(W) -> float:
    """Largest absolute eigenvalue of ``W - 11^T/K`` for a valid mixing matrix."""
    if not isinstance(W, MixingMatrix):
        W = MixingMatrix(np.asarray(W, dtype=float), tol=FILE_TOL)
    return W.spectral_norm


def load_matrix(path: str | Path) -> MixingMatrix:
    rows = []
    try:
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or all(not c.strip() for c in row):
                    continue
                try:
                    rows.append([float(c) for c in row])
                except ValueError as exc:
                    raise TopologyParseError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    except OSError as exc:
        raise TopologyParseError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise TopologyParseError(f"{path}: empty matrix file")
    k = len(rows)
    if any(len(r) != k for r in rows):
        raise TopologyParseError(f"{path}: expected {k}x{k} matrix, found ragged rows")
    w = np.array(rows)
    report = validate(w, tol=FILE_TOL)
    if not report.ok:
        raise TopologyValidationError(f"{path}: " + "; ".join(report.problems()), report)
    return MixingMatrix(w, name=str(path), tol=FILE_TOL)


def save_matrix(W: MixingMatrix, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        for row in W.weights:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
