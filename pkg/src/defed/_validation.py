"""Input checks shared by the estimators and the experiment runner."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_X_y

from .objective import Dataset
from .topology import MixingMatrix, build_complete_graph, build_regular_graph, load_matrix


def check_scalar_range(value, name: str, *, lo=None, hi=None, lo_inclusive=True, hi_inclusive=True, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a real number'}, got {value!r}")
    if lo is not None and (value < lo or (value == lo and not lo_inclusive)):
        raise ValueError(f"{name} must be {'>=' if lo_inclusive else '>'} {lo}, got {value}")
    if hi is not None and (value > hi or (value == hi and not hi_inclusive)):
        raise ValueError(f"{name} must be {'<=' if hi_inclusive else '<'} {hi}, got {value}")
    return value


def check_dataset(X, y, fit_intercept: bool = False) -> Dataset:
    X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
    if fit_intercept:
        X = np.hstack([np.ones((X.shape[0], 1)), X])
    return Dataset(X, y)


def resolve_topology(topology, n_clients: int, degree: int | None = None) -> MixingMatrix:
    """Turn ``"regular"``, ``"complete"``, a CSV path, an array or a MixingMatrix into a MixingMatrix."""
    if isinstance(topology, MixingMatrix):
        W = topology
    elif isinstance(topology, str) and topology == "regular":
        W = build_regular_graph(n_clients, degree if degree is not None else 2)
    elif isinstance(topology, str) and topology == "complete":
        W = build_complete_graph(n_clients)
    elif isinstance(topology, str):
        W = load_matrix(topology)
    else:
        W = MixingMatrix(np.asarray(topology, dtype=float), tol=1e-9)
    if W.size != n_clients:
        raise ValueError(f"topology has {W.size} clients but n_clients={n_clients}")
    return W
