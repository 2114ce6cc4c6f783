"""scikit-learn compatible wrappers around the federated simulators.

``fit`` splits the training set uniformly across simulated clients, runs DeFed
(or FedAvg) and keeps the mean iterate as the fitted linear model::

    >>> from defed.estimators import DeFedRegressor
    >>> model = DeFedRegressor(n_clients=10, degree=2, n_rounds=500).fit(X, y)
    >>> model.predict(X_new)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_dataset, check_scalar_range, resolve_topology
from .data import partition_uniform
from .engine import ALGORITHMS, Federation, RunConfig, Schedule, run
from .objective import ObjectiveSpec, sigmoid

__all__ = ["DeFedRegressor", "DeFedClassifier"]


class _FederatedLinearModel(BaseEstimator):
    _kind = "ridge"

    def __init__(
        self,
        algorithm="defed",
        n_clients=10,
        topology="regular",
        degree=2,
        reg=0.1,
        eta=0.1,
        delta=None,
        gamma=None,
        n_rounds=2000,
        batch_size=64,
        client_fraction=1.0,
        rescale_step=False,
        fit_intercept=True,
        partition_seed=0,
        random_state=0,
    ):
        self.algorithm = algorithm
        self.n_clients = n_clients
        self.topology = topology
        self.degree = degree
        self.reg = reg
        self.eta = eta
        self.delta = delta
        self.gamma = gamma
        self.n_rounds = n_rounds
        self.batch_size = batch_size
        self.client_fraction = client_fraction
        self.rescale_step = rescale_step
        self.fit_intercept = fit_intercept
        self.partition_seed = partition_seed
        self.random_state = random_state

    def _schedule(self) -> Schedule:
        if self.delta is not None or self.gamma is not None:
            if self.delta is None or self.gamma is None:
                raise ValueError("a diminishing schedule needs both delta and gamma")
            return Schedule.diminishing(self.delta, self.gamma)
        return Schedule.fixed(self.eta)

    def _fit_dataset(self, data):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        check_scalar_range(self.n_clients, "n_clients", lo=2, integer=True)
        check_scalar_range(self.n_rounds, "n_rounds", lo=1, integer=True)
        check_scalar_range(self.batch_size, "batch_size", lo=0, integer=True)
        check_scalar_range(self.client_fraction, "client_fraction", lo=0, hi=1, lo_inclusive=False)
        check_scalar_range(self.reg, "reg", lo=0)

        shards, self.partition_ = partition_uniform(data, self.n_clients, seed=self.partition_seed)
        problem = Federation(ObjectiveSpec(self._kind, self.reg), shards)
        self.topology_ = None
        if self.algorithm == "defed":
            self.topology_ = resolve_topology(self.topology, self.n_clients, self.degree)
        batch = min(self.batch_size, int(problem.sizes.min()))
        config = RunConfig(
            T=self.n_rounds,
            schedule=self._schedule(),
            batch_size=batch,
            C=self.client_fraction,
            log_every=max(1, self.n_rounds // 100),
            rescale_step=self.rescale_step,
        )
        self.trace_ = run(self.algorithm, problem, config, topology=self.topology_, seed=self.random_state)
        self.client_coefs_ = self.trace_.final_params
        w = self.trace_.final_model
        if self.fit_intercept:
            self.intercept_, self.coef_ = float(w[0]), w[1:].copy()
        else:
            self.intercept_, self.coef_ = 0.0, w.copy()
        self.n_features_in_ = data.dim - int(self.fit_intercept)
        return self

    def _decision(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_ + self.intercept_


class DeFedRegressor(RegressorMixin, _FederatedLinearModel):
    """Ridge regression trained by simulated decentralized (or federated) SGD."""

    _kind = "ridge"

    def fit(self, X, y):
        return self._fit_dataset(check_dataset(X, y, self.fit_intercept))

    def predict(self, X):
        return self._decision(X)


class DeFedClassifier(ClassifierMixin, _FederatedLinearModel):
    """Binary logistic regression trained by simulated decentralized (or federated) SGD."""

    _kind = "logistic"

    def fit(self, X, y):
        self._encoder = LabelEncoder()
        y_enc = self._encoder.fit_transform(np.asarray(y))
        if len(self._encoder.classes_) != 2:
            raise ValueError(f"DeFedClassifier is binary; got {len(self._encoder.classes_)} classes")
        self.classes_ = self._encoder.classes_
        return self._fit_dataset(check_dataset(X, y_enc.astype(float), self.fit_intercept))

    def decision_function(self, X):
        return self._decision(X)

    def predict_proba(self, X):
        p = sigmoid(self._decision(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.classes_[(self._decision(X) >= 0).astype(int)]
