"""Reference optima, constant estimation, convergence-bound certification and rate fits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .objective import (
    Dataset,
    ObjectiveSpec,
    constants,
    full_gradient,
    global_gradient,
    global_loss,
    loss,
    sigmoid,
)

__all__ = [
    "TASKS",
    "AnalysisError",
    "BoundEstimates",
    "Bound",
    "BoundCheck",
    "RateFit",
    "evaluate",
    "optimum_ridge",
    "optimum_numeric",
    "optimum",
    "heterogeneity_gaps",
    "estimate_sigma_chi",
    "consensus_error",
    "bound_constants",
    "theorem1_bound",
    "consensus_bound",
    "proposition1_bound",
    "check_bound",
    "fit_rate",
]

TASKS = ("accuracy", "mse")


class AnalysisError(ValueError):
    pass


def evaluate(objective: ObjectiveSpec, w, data: Dataset, task: str) -> float:
    """Accuracy (sigmoid threshold 0.5) for logistic models, unregularized MSE for ridge."""
    if task not in TASKS:
        raise AnalysisError(f"unknown task {task!r}; expected one of {TASKS}")
    if (task == "accuracy") != (objective.kind == "logistic"):
        raise AnalysisError(f"task {task!r} does not apply to a {objective.kind} objective")
    z = data.features @ np.asarray(w, dtype=float)
    if task == "mse":
        return float(np.mean((z - data.labels) ** 2))
    return float(np.mean((sigmoid(z) >= 0.5) == (data.labels == 1)))


def _pooled_normal_equations(shards: Sequence[Dataset], reg: float):
    m = sum(s.m for s in shards)
    n = shards[0].dim
    H = np.zeros((n, n))
    c = np.zeros(n)
    for s in shards:
        p = s.m / m
        H += p * (s.features.T @ s.features) / s.m
        c += p * (s.features.T @ s.labels) / s.m
    return H + reg * np.eye(n), c


def optimum_ridge(shards: Dataset | Sequence[Dataset], reg: float) -> np.ndarray:
    """Closed-form minimizer of the weighted ridge objective."""
    shards = [shards] if isinstance(shards, Dataset) else list(shards)
    H, c = _pooled_normal_equations(shards, reg)
    if np.linalg.cond(H) > 1e12:
        raise AnalysisError("normal equations are singular; use reg > 0")
    return np.linalg.solve(H, c)


def optimum_numeric(
    objective: ObjectiveSpec,
    shards: Dataset | Sequence[Dataset],
    tol: float = 1e-10,
    max_iter: int = 1_000_000,
    return_history: bool = False,
):
    """Full-batch gradient descent with step 1/L until ``||grad F|| <= tol``."""
    if not objective.reg > 0:
        raise AnalysisError("numeric optimum requires reg > 0 (strong convexity)")
    shards = [shards] if isinstance(shards, Dataset) else list(shards)
    step = 1.0 / constants(objective, shards).L
    w = np.zeros(shards[0].dim)
    history = [global_loss(objective, w, shards)] if return_history else None
    for _ in range(max_iter):
        g = global_gradient(objective, w, shards)
        if np.linalg.norm(g) <= tol:
            break
        w = w - step * g
        if return_history:
            history.append(global_loss(objective, w, shards))
    else:
        raise AnalysisError(f"gradient descent did not reach tolerance {tol} in {max_iter} steps")
    return (w, history) if return_history else w


def optimum(objective: ObjectiveSpec, shards: Dataset | Sequence[Dataset], tol: float = 1e-10) -> np.ndarray:
    if objective.kind == "ridge":
        return optimum_ridge(shards, objective.reg)
    return optimum_numeric(objective, shards, tol)


def heterogeneity_gaps(objective: ObjectiveSpec, shards: Sequence[Dataset], w_star=None) -> tuple[float, float]:
    """Return ``(epsilon, varsigma)``.

    ``epsilon = (1/K) sum_k (m_k/m) (F_k(w*) - F_k*)`` and
    ``varsigma = F(w*) - (1/K) sum_k F_k*``, with ``F_k*`` from per-shard optima.
    """
    shards = list(shards)
    if w_star is None:
        w_star = optimum(objective, shards)
    K = len(shards)
    m = sum(s.m for s in shards)
    f_at_star = np.array([loss(objective, w_star, s) for s in shards])
    f_local = np.array([loss(objective, optimum(objective, [s]), s) for s in shards])
    shares = np.array([s.m / m for s in shards])
    epsilon = float(np.sum(shares * (f_at_star - f_local)) / K)
    varsigma = float(np.sum(shares * f_at_star) - np.sum(f_local) / K)
    return epsilon, varsigma


def _batch_gradients(objective: ObjectiveSpec, w: np.ndarray, shard: Dataset, batch_size: int, n_draws: int, rng) -> np.ndarray:
    if batch_size == 0 or batch_size >= shard.m:
        return np.tile(full_gradient(objective, w, shard), (n_draws, 1))
    keys = rng.random((n_draws, shard.m))
    idx = np.argpartition(keys, batch_size - 1, axis=1)[:, :batch_size]
    X, y = shard.features[idx], shard.labels[idx]
    z = X @ w
    r = (sigmoid(z) if objective.kind == "logistic" else z) - y
    return np.einsum("dbn,db->dn", X, r) / batch_size + objective.reg * w


def estimate_sigma_chi(
    objective: ObjectiveSpec,
    shards: Sequence[Dataset],
    batch_size: int,
    w_ref,
    n_draws: int = 1000,
    seed: int = 0,
    per_client: bool = False,
):
    """Monte-Carlo estimates of the gradient-noise constants at ``w_ref``.

    ``sigma_k^2`` is the mean of ``||g_k - grad F_k||^2`` over mini-batch draws and
    ``sigma^2`` their average over clients; ``chi^2`` is the largest observed
    ``||g_k||^2``. ``w_ref`` may also be a ``(K, n)`` array of per-client points.
    """
    if n_draws < 100:
        raise AnalysisError(f"need at least 100 draws, got {n_draws}")
    shards = list(shards)
    w_ref = np.asarray(w_ref, dtype=float)
    points = np.tile(w_ref, (len(shards), 1)) if w_ref.ndim == 1 else w_ref
    rng = np.random.default_rng(seed)
    sig_k, chi2 = [], 0.0
    for shard, w in zip(shards, points):
        g = _batch_gradients(objective, w, shard, batch_size, n_draws, rng)
        dev = g - full_gradient(objective, w, shard)
        sig_k.append(float(np.mean(np.sum(dev * dev, axis=1))))
        chi2 = max(chi2, float(np.max(np.sum(g * g, axis=1))))
    sigma2 = float(np.mean(sig_k))
    if per_client:
        return sigma2, chi2, sig_k
    return sigma2, chi2


def consensus_error(P) -> float:
    """``||w - 1 (x) w_bar||^2`` for stacked client parameters ``P`` of shape (K, n)."""
    P = np.asarray(P, dtype=float)
    dev = P - P.mean(axis=0)
    return float(np.sum(dev * dev))


@dataclass(frozen=True)
class BoundEstimates:
    sigma2: float
    chi2: float
    epsilon: float
    varsigma: float = 0.0
    zeta: float | None = None
    zeta_tilde: float | None = None
    reason: str | None = None

    @property
    def defined(self) -> bool:
        return self.zeta is not None and self.zeta_tilde is not None

    def to_dict(self) -> dict:
        return {
            "sigma2": self.sigma2,
            "chi2": self.chi2,
            "epsilon": self.epsilon,
            "varsigma": self.varsigma,
            "zeta": self.zeta,
            "zeta_tilde": self.zeta_tilde,
            "defined": self.defined,
            "reason": self.reason,
        }


def bound_constants(
    estimates: BoundEstimates | tuple,
    L: float,
    mu: float,
    m: int,
    K: int,
    lam: float,
    delta: float,
    gamma: float,
    initial_states,
    w_star,
    consensus_term: str = "theorem",
) -> BoundEstimates:
    """Plug the measured constants into the consensus constant and the iterate constant.

    ``initial_states`` is one ``(K, n)`` start or a stack of them (one per seed);
    expectations over starts are plain means. ``consensus_term="theorem"`` scales
    the consensus contribution by ``m``; ``"unscaled"`` uses the bare value for
    comparison. A violated denominator condition yields ``zeta=None`` with a reason.
    """
    if isinstance(estimates, BoundEstimates):
        base = estimates
    else:
        sigma2, chi2, epsilon, *rest = estimates
        base = BoundEstimates(sigma2, chi2, epsilon, rest[0] if rest else 0.0)
    if consensus_term not in ("theorem", "unscaled"):
        raise AnalysisError(f"consensus_term must be 'theorem' or 'unscaled', got {consensus_term!r}")

    starts = np.asarray(initial_states, dtype=float)
    if starts.ndim == 2:
        starts = starts[None]
    w_star = np.asarray(w_star, dtype=float)
    init_consensus = float(np.mean([consensus_error(P) for P in starts]))
    init_dist = float(np.mean([np.sum((P.mean(axis=0) - w_star) ** 2) for P in starts]))

    mix_denominator = gamma**2 / ((gamma + 1) ** 2 * (1 + lam**2)) - 0.5
    iterate_denominator = mu * delta - m
    if not mix_denominator > 0:
        return BoundEstimates(**{**base.__dict__, "zeta": None, "zeta_tilde": None,
                                 "reason": "gamma too small: gamma^2/((gamma+1)^2 (1+lambda^2)) <= 1/2"})
    if not iterate_denominator > 0:
        return BoundEstimates(**{**base.__dict__, "zeta": None, "zeta_tilde": None,
                                 "reason": "mu * delta <= m"})
    zeta = max(
        gamma**2 * init_consensus,
        (1.0 / (1.0 - lam**2)) * delta**2 * K * base.chi2 / mix_denominator,
    )
    scale = m if consensus_term == "theorem" else 1.0
    zeta_tilde = max(
        ((6 * base.epsilon * L + base.sigma2) * delta**2 * m + 2 * zeta * scale) / iterate_denominator,
        gamma * init_dist,
    )
    return BoundEstimates(**{**base.__dict__, "zeta": zeta, "zeta_tilde": zeta_tilde, "reason": None})


@dataclass(frozen=True)
class Bound:
    """A per-round upper envelope on one trace metric.

    ``metric`` names the trace column; ``baseline`` is subtracted from it before
    comparing (``F*`` for the loss-gap bound).
    """

    kind: str
    metric: str
    params: dict = field(default_factory=dict)
    baseline: float = 0.0

    def __call__(self, t) -> float:
        p = self.params
        if self.kind == "theorem1":
            return p["zeta_tilde"] / (t + p["gamma"])
        if self.kind == "consensus":
            return p["zeta"] / (t + p["gamma"]) ** 2
        if self.kind == "proposition1":
            floor = p["eta"] * p["L"] * (p["sigma2"] + 2 * p["mu"] * p["varsigma"]) / (2 * p["mu"])
            return (1 - p["mu"] * p["eta"]) ** t * p["initial_gap"] + floor
        raise AnalysisError(f"unknown bound kind {self.kind!r}")


def theorem1_bound(est: BoundEstimates, gamma: float) -> Bound:
    if not est.defined:
        raise AnalysisError(f"bound undefined: {est.reason}")
    return Bound("theorem1", "dist_to_opt", {"zeta_tilde": est.zeta_tilde, "gamma": gamma})


def consensus_bound(est: BoundEstimates, gamma: float) -> Bound:
    if not est.defined:
        raise AnalysisError(f"bound undefined: {est.reason}")
    return Bound("consensus", "consensus_error", {"zeta": est.zeta, "gamma": gamma})


def proposition1_bound(eta: float, L: float, mu: float, sigma2: float, varsigma: float, f_star: float, initial_loss: float) -> Bound:
    params = {
        "eta": eta,
        "L": L,
        "mu": mu,
        "sigma2": sigma2,
        "varsigma": varsigma,
        "initial_gap": initial_loss - f_star,
    }
    return Bound("proposition1", "loss_mean_iterate", params, baseline=f_star)


@dataclass
class BoundCheck:
    kind: str
    t: np.ndarray
    measured: np.ndarray
    bound: np.ndarray
    slack: float
    params: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def margins(self) -> np.ndarray:
        return self.bound - self.measured

    @property
    def ok(self) -> np.ndarray:
        return self.measured <= self.bound + self.slack

    @property
    def passed(self) -> bool:
        return bool(np.all(self.ok))

    @property
    def worst_margin(self) -> float:
        return float(np.min(self.margins))

    @property
    def failures(self) -> list[int]:
        return [int(t) for t in self.t[~self.ok]]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "pass": self.passed,
            "worst_margin": self.worst_margin,
            "failed_rounds": self.failures,
            "params": self.params,
            **self.extra,
            "rounds": [
                {"t": int(t), "measured": float(v), "bound": float(b), "margin": float(b - v)}
                for t, v, b in zip(self.t, self.measured, self.bound)
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def check_bound(trace, bound: Bound, slack: float = 1e-12, extra: dict | None = None) -> BoundCheck:
    """Compare a (seed-averaged) trace metric against ``bound`` at every logged round."""
    t = trace.column("t")
    values = trace.column(bound.metric)
    if values.size == 0 or np.all(np.isnan(values)):
        raise AnalysisError(f"trace carries no {bound.metric!r} values")
    if np.any(np.isnan(values)):
        raise AnalysisError(f"trace has missing {bound.metric!r} values")
    measured = values - bound.baseline
    envelope = np.array([bound(int(s)) for s in t])
    return BoundCheck(bound.kind, t, measured, envelope, slack, dict(bound.params), dict(extra or {}))


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    window: tuple[float, float]
    n_points: int

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "window": list(self.window),
            "n_points": self.n_points,
        }


def fit_rate(trace, metric: str, window: tuple[float, float], t_offset: float = 0.0) -> RateFit:
    """Least-squares line through ``(log(t + t_offset), log metric)`` over ``window``.

    ``trace`` is a RunTrace or a ``(t, values)`` pair.
    """
    if hasattr(trace, "column"):
        t, y = trace.column("t"), trace.column(metric)
    else:
        t, y = (np.asarray(a, dtype=float) for a in trace)
    t_min, t_max = window
    if not t_min < t_max:
        raise AnalysisError(f"window must satisfy t_min < t_max, got {window}")
    sel = (t >= t_min) & (t <= t_max)
    ts, ys = t[sel] + t_offset, y[sel]
    if ts.size < 10:
        raise AnalysisError(f"need at least 10 points in window {window}, got {ts.size}")
    if np.any(ts <= 0):
        raise AnalysisError("time axis must be positive inside the window")
    if np.any(~(ys > 0)):
        raise AnalysisError(f"{metric} has nonpositive values inside the window")
    lx, ly = np.log(ts), np.log(ys)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    total = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - float(np.sum(resid**2) / total) if total > 0 else 1.0
    return RateFit(float(slope), float(intercept), r2, (float(t_min), float(t_max)), int(ts.size))
