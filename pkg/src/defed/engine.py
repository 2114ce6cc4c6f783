"""Round-synchronous FedAvg and DeFed simulation.

Randomness is split into independent streams keyed by ``(seed, purpose, client)``
so that results never depend on client evaluation order or on how many worker
threads run the seeds.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .objective import ConvexityConstants, Dataset, ObjectiveSpec, sigmoid
from .topology import MixingMatrix

__all__ = [
    "ALGORITHMS",
    "TRACE_COLUMNS",
    "EngineError",
    "RunError",
    "Schedule",
    "ScheduleValidation",
    "ClientState",
    "Federation",
    "BatchSampler",
    "RunConfig",
    "RunTrace",
    "eta_at",
    "validate_schedule",
    "theorem_schedule",
    "client_streams",
    "defed_round",
    "fedavg_round",
    "initial_parameters",
    "run",
    "run_seeds",
    "mean_trace",
]

ALGORITHMS = ("defed", "fedavg")
TRACE_COLUMNS = (
    "t",
    "eta",
    "consensus_error",
    "dist_to_opt",
    "loss_mean_iterate",
    "train_metric",
    "test_metric",
    "bound_value",
)

# spawn-key purposes for SeedSequence streams
_BATCH, _SELECT, _INIT = 0, 1, 2


class EngineError(ValueError):
    pass


class RunError(RuntimeError):
    """A run failed part-way; ``trace`` holds every round recorded before the failure."""

    def __init__(self, message: str, trace: "RunTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class Schedule:
    """Fixed step ``eta`` or diminishing ``delta / (t + gamma)``."""

    kind: str
    eta: float | None = None
    delta: float | None = None
    gamma: float | None = None

    def __post_init__(self) -> None:
        if self.kind == "fixed":
            if self.eta is None or not self.eta > 0:
                raise EngineError(f"fixed schedule needs eta > 0, got {self.eta}")
        elif self.kind == "diminishing":
            if self.delta is None or not self.delta > 0:
                raise EngineError(f"diminishing schedule needs delta > 0, got {self.delta}")
            if self.gamma is None or not self.gamma >= 1:
                raise EngineError(f"diminishing schedule needs gamma >= 1, got {self.gamma}")
        else:
            raise EngineError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def fixed(cls, eta: float) -> "Schedule":
        return cls("fixed", eta=eta)

    @classmethod
    def diminishing(cls, delta: float, gamma: float) -> "Schedule":
        return cls("diminishing", delta=delta, gamma=gamma)

    def __call__(self, t: int) -> float:
        return eta_at(self, t)

    def to_dict(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "eta": self.eta}
        return {"kind": "diminishing", "delta": self.delta, "gamma": self.gamma}


def eta_at(schedule: Schedule, t: int) -> float:
    if t < 0:
        raise EngineError(f"round index must be >= 0, got {t}")
    if schedule.kind == "fixed":
        return schedule.eta
    return schedule.delta / (t + schedule.gamma)


@dataclass(frozen=True)
class ScheduleValidation:
    kind: str
    delta_over_mu: bool | None = None
    gamma_contraction: bool | None = None
    step_bound: bool | None = None
    fixed_rate: bool | None = None
    overall_ok: bool = False

    def failed(self) -> list[str]:
        names = {
            "delta_over_mu": "delta > m / mu",
            "gamma_contraction": "gamma / (gamma + 1) >= sqrt((1 + lambda^2) / 2)",
            "step_bound": "delta / gamma <= 1 / (2 L)",
            "fixed_rate": "eta < 1 / L",
        }
        return [text for key, text in names.items() if getattr(self, key) is False]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "delta_over_mu": self.delta_over_mu,
            "gamma_contraction": self.gamma_contraction,
            "step_bound": self.step_bound,
            "fixed_rate": self.fixed_rate,
            "overall_ok": self.overall_ok,
            "failed": self.failed(),
        }


def validate_schedule(schedule: Schedule, constants: ConvexityConstants | tuple, m: int, lam: float) -> ScheduleValidation:
    """Evaluate the step-size conditions in exact rational arithmetic.

    ``constants`` is a :class:`ConvexityConstants` or an ``(L, mu)`` pair.
    """
    if isinstance(constants, ConvexityConstants):
        L, mu = constants.L, constants.mu
    else:
        L, mu = constants
    L, mu, lam = Fraction(L), Fraction(mu), Fraction(lam)
    if schedule.kind == "fixed":
        ok = Fraction(schedule.eta) * L < 1
        return ScheduleValidation("fixed", fixed_rate=ok, overall_ok=ok)
    delta, gamma = Fraction(schedule.delta), Fraction(schedule.gamma)
    # delta > m/mu and delta/gamma <= 1/(2L), cross-multiplied to avoid division by zero
    d_ok = mu > 0 and delta * mu > m
    g_ok = (gamma / (gamma + 1)) ** 2 >= (1 + lam**2) / 2
    s_ok = 2 * L * delta <= gamma
    return ScheduleValidation(
        "diminishing",
        delta_over_mu=bool(d_ok),
        gamma_contraction=bool(g_ok),
        step_bound=bool(s_ok),
        overall_ok=bool(d_ok and g_ok and s_ok),
    )


def theorem_schedule(constants: ConvexityConstants | tuple, m: int, lam: float, delta_factor: float = 1.01) -> Schedule:
    """Smallest-ish diminishing schedule that satisfies the step-size conditions.

    Picks ``delta = delta_factor * m / mu`` and the least ``gamma`` meeting both the
    contraction and step-bound conditions, padded slightly against rounding.
    """
    if isinstance(constants, ConvexityConstants):
        L, mu = constants.L, constants.mu
    else:
        L, mu = constants
    if not mu > 0:
        raise EngineError("a diminishing schedule needs a strongly convex objective (mu > 0)")
    if not delta_factor > 1:
        raise EngineError(f"delta_factor must be > 1, got {delta_factor}")
    delta = delta_factor * m / mu
    s = math.sqrt((1 + lam**2) / 2)
    contraction = s / (1 - s) if s < 1 else math.inf
    if not math.isfinite(contraction):
        raise EngineError("lambda = 1: no gamma satisfies the contraction condition")
    gamma = max(2 * L * delta, contraction, 1.0) * 1.0001
    return Schedule.diminishing(delta, gamma)


@dataclass
class ClientState:
    id: int
    w: np.ndarray
    shard: Dataset
    weight: float


class Federation:
    """Client shards under one objective, with a batched gradient evaluator."""

    def __init__(self, objective: ObjectiveSpec, shards: Sequence[Dataset]):
        if not shards:
            raise EngineError("need at least one client shard")
        dims = {s.dim for s in shards}
        if len(dims) != 1:
            raise EngineError(f"client shards disagree on feature dimension: {sorted(dims)}")
        self.objective = objective
        self.shards = list(shards)
        self.K = len(self.shards)
        self.dim = dims.pop()
        self.sizes = np.array([s.m for s in self.shards])
        self.m = int(self.sizes.sum())
        self.weights = self.sizes / self.m
        if objective.kind == "logistic":
            for s in self.shards:
                if not np.all((s.labels == 0) | (s.labels == 1)):
                    raise EngineError("logistic labels must be 0 or 1")
        self._stacked = None
        if len(set(self.sizes.tolist())) == 1:
            self._stacked = (
                np.stack([s.features for s in self.shards]),
                np.stack([s.labels for s in self.shards]),
            )
        self._pooled = None

    @property
    def pooled(self) -> Dataset:
        if self._pooled is None:
            self._pooled = Dataset.concatenate(self.shards)
        return self._pooled

    def loss_and_metric(self, w: np.ndarray, data: Dataset | None = None) -> tuple[float, float]:
        """Global objective F(w) on the pooled shards (or ``data``) and the task metric."""
        data = self.pooled if data is None else data
        z = data.features @ w
        y = data.labels
        penalty = 0.5 * self.objective.reg * (w @ w)
        if self.objective.kind == "ridge":
            r = z - y
            mse = float(np.mean(r * r))
            return 0.5 * mse + penalty, mse
        value = float(np.mean(np.logaddexp(0.0, z) - y * z)) + penalty
        return value, float(np.mean((z >= 0) == (y == 1)))

    def states(self, P: np.ndarray) -> list[ClientState]:
        return [ClientState(k, P[k].copy(), s, float(self.weights[k])) for k, s in enumerate(self.shards)]

    def gradients(self, P: np.ndarray, batches: Sequence[np.ndarray | None], clients=None) -> np.ndarray:
        """Row ``i`` is the stochastic gradient of client ``clients[i]`` at ``P[i]``.

        A ``None`` batch means the full shard.
        """
        clients = np.arange(self.K) if clients is None else np.asarray(clients)
        reg = self.objective.reg
        logistic = self.objective.kind == "logistic"
        sizes = {None if b is None else len(b) for b in batches}
        if self._stacked is not None and len(sizes) == 1:
            X, Y = self._stacked
            if None in sizes:
                Xb, Yb = X[clients], Y[clients]
            else:
                idx = np.stack(batches)
                rows = clients[:, None]
                Xb, Yb = X[rows, idx], Y[rows, idx]
            z = np.einsum("kbn,kn->kb", Xb, P)
            r = (sigmoid(z) if logistic else z) - Yb
            return np.einsum("kbn,kb->kn", Xb, r) / Xb.shape[1] + reg * P
        out = np.empty_like(P)
        for i, (k, batch) in enumerate(zip(clients, batches)):
            shard = self.shards[k]
            x = shard.features if batch is None else shard.features[batch]
            y = shard.labels if batch is None else shard.labels[batch]
            z = x @ P[i]
            r = (sigmoid(z) if logistic else z) - y
            out[i] = x.T @ r / x.shape[0] + reg * P[i]
        return out


class BatchSampler:
    """Uniform without-replacement mini-batches from one client's private stream.

    Batches are drawn in fixed-size blocks (random keys, smallest ``batch_size``
    win), so the sequence depends only on the stream, never on the run length.
    """

    BLOCK = 128

    def __init__(self, m: int, batch_size: int, rng: np.random.Generator):
        if batch_size < 0:
            raise EngineError(f"batch size must be >= 0, got {batch_size}")
        if batch_size > m:
            raise EngineError(f"batch size {batch_size} exceeds shard size {m}")
        self.m = m
        self.full = batch_size == 0 or batch_size == m
        self.batch_size = m if self.full else batch_size
        self.rng = rng
        self._buf = None
        self._pos = 0

    def next(self) -> np.ndarray | None:
        if self.full:
            return None
        if self._buf is None or self._pos == len(self._buf):
            keys = self.rng.random((self.BLOCK, self.m))
            self._buf = np.argpartition(keys, self.batch_size - 1, axis=1)[:, : self.batch_size]
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out


def _seed_seq(seed, purpose: int, *keys: int) -> np.random.SeedSequence:
    entropy = list(seed) if isinstance(seed, (tuple, list)) else seed
    return np.random.SeedSequence(entropy, spawn_key=(purpose, *keys))


def client_streams(seed, K: int) -> list[np.random.Generator]:
    """One independent generator per client for mini-batch sampling."""
    return [np.random.Generator(np.random.PCG64(_seed_seq(seed, _BATCH, k))) for k in range(K)]


def _draw(samplers, clients) -> list:
    return [samplers[k].next() for k in clients]


def defed_round(
    states: Sequence[ClientState],
    W: MixingMatrix,
    eta_t: float,
    objective: ObjectiveSpec,
    batch_size: int = 0,
    rngs: Sequence[np.random.Generator] | None = None,
    rescale_step: bool = False,
) -> tuple[list[ClientState], np.ndarray]:
    """One DeFed round: every client mixes all round-t models and subtracts its
    weighted gradient taken at its own round-t model.

    Returns the new states and the weighted gradients ``(m_k/m) g_k`` that were applied.
    """
    K = len(states)
    if W.size != K:
        raise EngineError(f"mixing matrix is {W.size}x{W.size} but there are {K} clients")
    if eta_t < 0:
        raise EngineError(f"learning rate must be >= 0, got {eta_t}")
    fed = Federation(objective, [s.shard for s in states])
    if rngs is None and batch_size:
        raise EngineError("mini-batch rounds need per-client generators")
    batches = [None] * K
    if batch_size:
        batches = [BatchSampler(s.shard.m, batch_size, rng).next() for s, rng in zip(states, rngs)]
    P = np.stack([np.asarray(s.w, dtype=float) for s in states])
    if P.shape[1] != fed.dim:
        raise EngineError(f"parameters have length {P.shape[1]}, features {fed.dim}")
    G = fed.weights[:, None] * fed.gradients(P, batches)
    step = eta_t * K if rescale_step else eta_t
    P_new = W.weights @ P - step * G
    return [ClientState(s.id, P_new[k], s.shard, s.weight) for k, s in enumerate(states)], G


def _select(rng: np.random.Generator, K: int, C: float) -> np.ndarray:
    n = max(int(math.floor(C * K)), 1)
    return np.sort(rng.choice(K, size=n, replace=False))


def fedavg_round(
    states: Sequence[ClientState],
    global_w: np.ndarray,
    eta_t: float,
    objective: ObjectiveSpec,
    C: float = 1.0,
    batch_size: int = 0,
    rng: np.random.Generator | None = None,
    client_rngs: Sequence[np.random.Generator] | None = None,
) -> tuple[list[ClientState], np.ndarray, np.ndarray]:
    """One FedAvg round. Returns new states, the new global model and the selected clients."""
    if not 0 < C <= 1:
        raise EngineError(f"client fraction C must be in (0, 1], got {C}")
    K = len(states)
    fed = Federation(objective, [s.shard for s in states])
    if C < 1 and rng is None:
        raise EngineError("partial participation needs a selection generator")
    selected = np.arange(K) if C == 1 else _select(rng, K, C)
    batches = [None] * len(selected)
    if batch_size:
        if client_rngs is None:
            raise EngineError("mini-batch rounds need per-client generators")
        batches = [BatchSampler(states[k].shard.m, batch_size, client_rngs[k]).next() for k in selected]
    P = np.stack([np.asarray(s.w, dtype=float) for s in states])
    w = np.asarray(global_w, dtype=float)
    P[selected] = w - eta_t * fed.gradients(np.tile(w, (len(selected), 1)), batches, selected)
    new_global = fed.weights @ P
    return [ClientState(s.id, P[k], s.shard, s.weight) for k, s in enumerate(states)], new_global, selected


@dataclass
class RunConfig:
    T: int
    schedule: Schedule
    batch_size: int = 0
    C: float = 1.0
    log_every: int = 1
    init: str | np.ndarray = "zeros"
    init_scale: float = 1.0
    rescale_step: bool = False

    def __post_init__(self) -> None:
        if self.T < 1:
            raise EngineError(f"T must be >= 1, got {self.T}")
        if self.log_every < 1:
            raise EngineError(f"log_every must be >= 1, got {self.log_every}")
        if not 0 < self.C <= 1:
            raise EngineError(f"C must be in (0, 1], got {self.C}")
        if self.batch_size < 0:
            raise EngineError(f"batch_size must be >= 0, got {self.batch_size}")

    def to_dict(self) -> dict:
        init = self.init if isinstance(self.init, str) else np.asarray(self.init).tolist()
        return {
            "T": self.T,
            "schedule": self.schedule.to_dict(),
            "batch_size": self.batch_size,
            "C": self.C,
            "log_every": self.log_every,
            "init": init,
            "init_scale": self.init_scale,
            "rescale_step": self.rescale_step,
        }


@dataclass
class RunTrace:
    """Per-round metric table plus run metadata."""

    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    final_params: np.ndarray | None = field(default=None, repr=False)
    final_model: np.ndarray | None = field(default=None, repr=False)

    def append(self, **row) -> None:
        self.rows.append({c: row.get(c, math.nan) for c in TRACE_COLUMNS})

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def columns(self) -> tuple[str, ...]:
        return TRACE_COLUMNS

    def column(self, name: str) -> np.ndarray:
        if name not in TRACE_COLUMNS:
            raise KeyError(f"unknown trace column {name!r}; available: {', '.join(TRACE_COLUMNS)}")
        return np.array([r[name] for r in self.rows], dtype=float)

    @property
    def t(self) -> np.ndarray:
        return self.column("t")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(TRACE_COLUMNS) + "\n")
            for r in self.rows:
                cells = [str(int(r["t"]))] + [f"{float(r[c]):.17g}" for c in TRACE_COLUMNS[1:]]
                fh.write(",".join(cells) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "RunTrace":
        trace = cls(meta={"source": str(path)})
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(TRACE_COLUMNS) - set(reader.fieldnames or [])
            if missing:
                raise EngineError(f"{path}: missing trace columns {sorted(missing)}")
            for row in reader:
                trace.append(**{c: float(row[c]) for c in TRACE_COLUMNS})
        return trace


def initial_parameters(init, K: int, dim: int, seed=0, scale: float = 1.0) -> np.ndarray:
    """Starting parameters for all clients as a ``(K, dim)`` array.

    ``"zeros"`` (common zero vector), ``"random"`` (independent Gaussian points of
    standard deviation ``scale`` per client), a shared vector, or a full matrix.
    """
    if isinstance(init, str):
        if init == "zeros":
            return np.zeros((K, dim))
        if init == "random":
            return np.stack(
                [
                    scale * np.random.Generator(np.random.PCG64(_seed_seq(seed, _INIT, k))).standard_normal(dim)
                    for k in range(K)
                ]
            )
        raise EngineError(f"unknown init {init!r}; expected 'zeros', 'random' or an array")
    arr = np.asarray(init, dtype=float)
    if arr.shape == (dim,):
        return np.tile(arr, (K, 1))
    if arr.shape == (K, dim):
        return arr.copy()
    raise EngineError(f"init array has shape {arr.shape}, expected ({dim},) or ({K}, {dim})")


def run(
    algorithm: str,
    problem: Federation,
    config: RunConfig,
    *,
    topology: MixingMatrix | None = None,
    seed=0,
    w_star: np.ndarray | None = None,
    test_data: Dataset | None = None,
    bound: Callable[[int], float] | None = None,
    round_hook: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> RunTrace:
    """Run ``config.T`` rounds of ``algorithm`` and record metrics at the mean iterate.

    For DeFed the mean iterate is the plain average of client models; for FedAvg
    it is the server model. ``round_hook(t, P, G)`` is called after each DeFed
    round with the round-t parameters and the applied weighted gradients.
    """
    if algorithm not in ALGORITHMS:
        raise EngineError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    K = problem.K
    if algorithm == "defed":
        if topology is None:
            raise EngineError("DeFed needs a mixing matrix")
        if topology.size != K:
            raise EngineError(f"topology has {topology.size} clients, data has {K}")
    if config.batch_size > problem.sizes.min():
        raise EngineError(f"batch size {config.batch_size} exceeds smallest shard ({problem.sizes.min()})")

    trace = RunTrace(
        meta={
            "algorithm": algorithm,
            "K": K,
            "topology": topology.name if topology is not None else "star",
            "seed": list(seed) if isinstance(seed, (tuple, list)) else seed,
            "schedule": config.schedule.to_dict(),
            "config": config.to_dict(),
        }
    )
    samplers = [BatchSampler(s.m, config.batch_size, rng) for s, rng in zip(problem.shards, client_streams(seed, K))]
    select_rng = np.random.Generator(np.random.PCG64(_seed_seq(seed, _SELECT)))
    P = initial_parameters(config.init, K, problem.dim, seed, config.init_scale)
    if algorithm == "fedavg":
        global_w = problem.weights @ P
    mix = topology.weights if topology is not None else None
    step_factor = K if config.rescale_step else 1.0

    def record(t: int) -> None:
        w_bar = global_w if algorithm == "fedavg" else P.mean(axis=0)
        if not np.all(np.isfinite(P)) or not np.all(np.isfinite(w_bar)):
            raise FloatingPointError(f"parameters diverged at round {t}")
        dev = P - w_bar
        value, metric = problem.loss_and_metric(w_bar)
        trace.append(
            t=t,
            eta=eta_at(config.schedule, t),
            consensus_error=float(np.sum(dev * dev)),
            dist_to_opt=float(np.sum((w_bar - w_star) ** 2)) if w_star is not None else math.nan,
            loss_mean_iterate=value,
            train_metric=metric,
            test_metric=problem.loss_and_metric(w_bar, test_data)[1] if test_data is not None else math.nan,
            bound_value=bound(t) if bound is not None else math.nan,
        )

    # overflow is detected explicitly by record(), so numpy need not warn about it
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            record(0)
            for t in range(config.T):
                eta = eta_at(config.schedule, t)
                if algorithm == "defed":
                    G = problem.weights[:, None] * problem.gradients(P, _draw(samplers, range(K)))
                    if round_hook is not None:
                        round_hook(t, P, G)
                    P = mix @ P - (eta * step_factor) * G
                else:
                    sel = np.arange(K) if config.C == 1 else _select(select_rng, K, config.C)
                    grads = problem.gradients(np.tile(global_w, (len(sel), 1)), _draw(samplers, sel), sel)
                    P[sel] = global_w - eta * grads
                    global_w = problem.weights @ P
                if (t + 1) % config.log_every == 0 or t + 1 == config.T:
                    record(t + 1)
        except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            trace.warnings.append(str(exc))
            raise RunError(str(exc), trace) from exc
    trace.final_params = P.copy()
    trace.final_model = global_w.copy() if algorithm == "fedavg" else P.mean(axis=0)
    return trace


def run_seeds(algorithm: str, problem: Federation, config: RunConfig, seeds: Sequence, threads: int = 1, **kwargs) -> list[RunTrace]:
    """Independent runs, one per seed, returned in seed order whatever ``threads`` is."""
    if threads <= 1:
        return [run(algorithm, problem, config, seed=s, **kwargs) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: run(algorithm, problem, config, seed=s, **kwargs), seeds))


def mean_trace(traces: Sequence[RunTrace]) -> RunTrace:
    """Column-wise mean over traces sharing the same logged rounds (fixed summation order)."""
    if not traces:
        raise EngineError("no traces to average")
    t0 = traces[0].t
    for tr in traces[1:]:
        if not np.array_equal(tr.t, t0):
            raise EngineError("traces log different rounds")
    out = RunTrace(meta={**traces[0].meta, "n_seeds": len(traces), "seed": [tr.meta.get("seed") for tr in traces]})
    cols = {c: np.zeros(len(t0)) for c in TRACE_COLUMNS[1:]}
    for tr in traces:
        for c in cols:
            cols[c] += tr.column(c)
    for i, t in enumerate(t0):
        out.append(t=int(t), **{c: cols[c][i] / len(traces) for c in cols})
    for tr in traces:
        out.warnings.extend(w for w in tr.warnings if w not in out.warnings)
    return out
