"""Text experiment configs and the end-to-end runner behind ``defed run``.

A config is flat ``key = value`` text with dotted section prefixes::

    algorithm = defed
    topology.kind = regular
    topology.K = 10
    topology.l = 2
    objective.kind = ridge
    objective.reg = 0.1
    data.source = synthetic-regression
    data.n_samples = 2000
    schedule.kind = fixed
    schedule.eta = 0.1
    run.T = 2000
    run.batch_size = 64

Blank lines and ``#`` comments are ignored. Unknown keys are rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .analysis import (
    BoundEstimates,
    bound_constants,
    check_bound,
    consensus_bound,
    estimate_sigma_chi,
    fit_rate,
    heterogeneity_gaps,
    optimum,
    proposition1_bound,
    theorem1_bound,
)
from .data import (
    generate_classification,
    generate_regression,
    load_csv_dataset,
    partition_uniform,
    polynomial_features,
)
from .engine import (
    ALGORITHMS,
    Federation,
    RunConfig,
    RunTrace,
    Schedule,
    initial_parameters,
    mean_trace,
    run_seeds,
    theorem_schedule,
    validate_schedule,
)
from .objective import KINDS, Dataset, ObjectiveSpec, constants, full_gradient, global_loss
from .topology import MixingMatrix, build_complete_graph, build_regular_graph, load_matrix

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "Prepared",
    "ExperimentResult",
    "parse_config",
    "load_config",
    "prepare",
    "run_experiment",
    "write_outputs",
]

SOURCES = ("synthetic-regression", "synthetic-classification", "csv")
TOPOLOGY_KINDS = ("regular", "complete", "file")
SCHEDULE_KINDS = ("fixed", "diminishing", "theorem")

_ON = {"on", "true", "yes", "1"}
_OFF = {"off", "false", "no", "0"}


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _ON:
        return True
    if low in _OFF:
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _int(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _seeds(text: str) -> int | tuple[int, ...]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) == 1:
        return _int(parts[0])
    return tuple(_int(p) for p in parts)


def _window(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.replace(",", " ").split()]
    if len(parts) != 2:
        raise ValueError(f"expected two numbers 't_min, t_max', got {text!r}")
    return parts[0], parts[1]


# key -> (parser, default); a None default means unset
_SCHEMA = {
    "algorithm": (str, "defed"),
    "topology.kind": (str, "regular"),
    "topology.K": (_int, 10),
    "topology.l": (_int, 2),
    "topology.path": (str, None),
    "objective.kind": (str, "ridge"),
    "objective.reg": (float, 0.1),
    "objective.feature_map": (str, "identity"),
    "data.source": (str, "synthetic-regression"),
    "data.n_samples": (_int, 2000),
    "data.n_test": (_int, 0),
    "data.lo": (float, -6.0),
    "data.hi": (float, 6.0),
    "data.noise_std": (float, 0.1),
    "data.dim": (_int, 2),
    "data.margin": (float, 2.0),
    "data.seed": (_int, 0),
    "data.path": (str, None),
    "data.test_path": (str, None),
    "data.label_column": (_int, 0),
    "data.partition_seed": (_int, 0),
    "schedule.kind": (str, "fixed"),
    "schedule.eta": (float, 0.1),
    "schedule.delta": (float, None),
    "schedule.gamma": (float, None),
    "schedule.delta_factor": (float, 1.01),
    "run.T": (_int, 1000),
    "run.batch_size": (_int, 64),
    "run.C": (float, 1.0),
    "run.seed": (_int, 0),
    "run.seeds": (_seeds, 1),
    "run.log_every": (_int, 1),
    "run.init": (str, "zeros"),
    "run.init_scale": (float, 1.0),
    "run.rescale_step": (_bool, False),
    "analysis.oracle": (_bool, True),
    "analysis.bound_check": (_bool, False),
    "analysis.n_seeds": (_int, 20),
    "analysis.sigma_draws": (_int, 1000),
    "analysis.rate_window": (_window, None),
    "analysis.consensus_term": (str, "theorem"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment settings; ``values`` maps every known key to its value."""

    values: dict
    source: str | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, key: str):
        return self.values[key]

    def with_values(self, **updates) -> "ExperimentConfig":
        merged = dict(self.values)
        for k, v in updates.items():
            merged[k.replace("__", ".")] = v
        return _checked(replace(self, values=merged))

    def path(self, key: str) -> Path | None:
        raw = self.values[key]
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seeds(self) -> list:
        """Run seeds, each a ``(master, index)`` pair unless listed explicitly."""
        spec = self.values["run.seeds"]
        if self.values["analysis.bound_check"] and isinstance(spec, int):
            spec = max(spec, self.values["analysis.n_seeds"])
        if isinstance(spec, tuple):
            return list(spec)
        master = self.values["run.seed"]
        return [(master, i) for i in range(spec)]

    def echo(self) -> str:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if v is None:
                continue
            if isinstance(v, bool):
                text = "on" if v else "off"
            elif isinstance(v, tuple):
                text = ", ".join(str(x) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    def differing_keys(self, other: "ExperimentConfig") -> list[str]:
        keys = set(self.values) | set(other.values)
        return sorted(k for k in keys if self.values.get(k) != other.values.get(k))


def parse_config(text: str, source: str | None = None, base_dir: Path | None = None) -> ExperimentConfig:
    values = {k: default for k, (_, default) in _SCHEMA.items()}
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source or '<config>'}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        parser = _SCHEMA[key][0]
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        seen.add(key)
        if not value:
            raise ConfigError(f"{where}: empty value for {key!r}")
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    cfg = ExperimentConfig(values, source, base_dir if base_dir is not None else Path.cwd())
    return _checked(cfg)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path), path.parent)


def _feature_degree(spec: str) -> int | None:
    if spec == "identity":
        return None
    if spec.startswith("poly:"):
        try:
            d = int(spec[5:])
        except ValueError:
            d = 0
        if d >= 1:
            return d
    raise ConfigError(f"objective.feature_map must be 'identity' or 'poly:<degree>', got {spec!r}")


def _checked(cfg: ExperimentConfig) -> ExperimentConfig:
    v = cfg.values

    def need(cond: bool, msg: str) -> None:
        if not cond:
            raise ConfigError(msg)

    need(v["algorithm"] in ALGORITHMS, f"algorithm must be one of {ALGORITHMS}, got {v['algorithm']!r}")
    need(v["topology.kind"] in TOPOLOGY_KINDS, f"topology.kind must be one of {TOPOLOGY_KINDS}")
    need(v["objective.kind"] in KINDS, f"objective.kind must be one of {KINDS}")
    need(v["data.source"] in SOURCES, f"data.source must be one of {SOURCES}")
    need(v["schedule.kind"] in SCHEDULE_KINDS, f"schedule.kind must be one of {SCHEDULE_KINDS}")
    need(v["analysis.consensus_term"] in ("theorem", "unscaled"), "analysis.consensus_term must be 'theorem' or 'unscaled'")
    need(v["run.T"] >= 1, f"run.T must be >= 1, got {v['run.T']}")
    need(v["run.batch_size"] >= 0, "run.batch_size must be >= 0 (0 means full batch)")
    need(0 < v["run.C"] <= 1, f"run.C must be in (0, 1], got {v['run.C']}")
    need(v["run.log_every"] >= 1, "run.log_every must be >= 1")
    need(v["run.init"] in ("zeros", "random"), "run.init must be 'zeros' or 'random'")
    need(v["objective.reg"] >= 0, "objective.reg must be >= 0")
    need(v["topology.K"] >= 2, "topology.K must be >= 2")
    need(v["analysis.n_seeds"] >= 1, "analysis.n_seeds must be >= 1")
    need(v["analysis.sigma_draws"] >= 100, "analysis.sigma_draws must be >= 100")
    seeds = v["run.seeds"]
    need(isinstance(seeds, tuple) or seeds >= 1, "run.seeds must be a positive count or a list of seeds")
    if v["schedule.kind"] == "fixed":
        need(v["schedule.eta"] > 0, "schedule.eta must be > 0")
    if v["schedule.kind"] == "diminishing":
        need(v["schedule.delta"] is not None and v["schedule.gamma"] is not None,
             "a diminishing schedule needs schedule.delta and schedule.gamma")
    if v["schedule.kind"] == "theorem":
        need(v["objective.reg"] > 0 or v["objective.kind"] == "ridge", "schedule.kind = theorem needs objective.reg > 0")
    if v["topology.kind"] == "file":
        p = cfg.path("topology.path")
        need(p is not None, "topology.kind = file needs topology.path")
        need(p.is_file(), f"topology file not found: {p}")
    if v["data.source"] == "csv":
        p = cfg.path("data.path")
        need(p is not None, "data.source = csv needs data.path")
        need(p.is_file(), f"data file not found: {p}")
    if v["data.test_path"] is not None:
        need(cfg.path("data.test_path").is_file(), f"test data file not found: {cfg.path('data.test_path')}")
    if v["data.source"] == "synthetic-classification":
        need(v["objective.kind"] == "logistic", "synthetic-classification data needs objective.kind = logistic")
    if v["data.source"] == "synthetic-regression":
        need(v["objective.kind"] == "ridge", "synthetic-regression data needs objective.kind = ridge")
    _feature_degree(v["objective.feature_map"])
    return cfg


def _apply_features(raw: np.ndarray, feature_map: str) -> np.ndarray:
    degree = _feature_degree(feature_map)
    if degree is None:
        return raw
    if raw.shape[1] != 1:
        raise ConfigError(f"feature map {feature_map!r} needs one-dimensional inputs, got {raw.shape[1]} columns")
    return polynomial_features(raw[:, 0], degree)


def _load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    v = cfg.values
    src = v["data.source"]
    test = None
    if src == "synthetic-regression":
        gen = lambda n, seed: generate_regression(n, v["data.lo"], v["data.hi"], v["data.noise_std"], seed=seed)
        train = gen(v["data.n_samples"], v["data.seed"])
        if v["data.n_test"] > 0:
            test = gen(v["data.n_test"], (v["data.seed"], 1))
        # generated features are [1, x]; the feature map acts on the raw x column
        raw = lambda d: d.features[:, 1:]
        if v["objective.feature_map"] == "identity":
            fmap = lambda d: d
        else:
            fmap = lambda d: Dataset(_apply_features(raw(d), v["objective.feature_map"]), d.labels)
        train = fmap(train)
        test = fmap(test) if test is not None else None
    elif src == "synthetic-classification":
        gen = lambda n, seed: generate_classification(n, v["data.dim"], v["data.margin"], seed=seed)
        train = gen(v["data.n_samples"], v["data.seed"])
        if v["data.n_test"] > 0:
            test = _fresh_classification(v, v["data.n_test"])
        train = Dataset(_apply_features(train.features, v["objective.feature_map"]), train.labels)
        if test is not None:
            test = Dataset(_apply_features(test.features, v["objective.feature_map"]), test.labels)
    else:
        train = load_csv_dataset(cfg.path("data.path"), v["data.label_column"])
        train = Dataset(_apply_features(train.features, v["objective.feature_map"]), train.labels)
    if v["data.test_path"] is not None:
        test = load_csv_dataset(cfg.path("data.test_path"), v["data.label_column"])
        test = Dataset(_apply_features(test.features, v["objective.feature_map"]), test.labels)
    if test is not None and test.dim != train.dim:
        raise ConfigError(f"test data has {test.dim} features, training data has {train.dim}")
    if v["objective.kind"] == "logistic" and not np.all(np.isin(train.labels, (0.0, 1.0))):
        raise ConfigError("logistic objective needs labels in {0, 1}")
    return train, test


def _fresh_classification(v: dict, n: int) -> Dataset:
    # test points share the training centres but use an independent noise stream
    if n % 2:
        raise ConfigError("data.n_test must be even for synthetic-classification")
    rng = np.random.default_rng(v["data.seed"])
    u = rng.standard_normal(v["data.dim"])
    u /= np.linalg.norm(u)
    noise = np.random.default_rng((v["data.seed"], 1))
    labels = np.repeat([1.0, 0.0], n // 2)
    x = np.where(labels[:, None] == 1.0, 1.0, -1.0) * v["data.margin"] * u + noise.standard_normal((n, v["data.dim"]))
    order = noise.permutation(n)
    return Dataset(x[order], labels[order])


def _topology(cfg: ExperimentConfig) -> MixingMatrix | None:
    v = cfg.values
    if v["algorithm"] == "fedavg":
        return None
    kind = v["topology.kind"]
    if kind == "regular":
        return build_regular_graph(v["topology.K"], v["topology.l"])
    if kind == "complete":
        return build_complete_graph(v["topology.K"])
    return load_matrix(cfg.path("topology.path"))


@dataclass
class Prepared:
    """Everything derived from a config before any training round runs."""

    config: ExperimentConfig
    problem: Federation
    topology: MixingMatrix | None
    test_data: Dataset | None
    run_config: RunConfig
    constants: object
    lam: float
    w_star: np.ndarray | None
    f_star: float | None
    schedule_validation: object


def prepare(cfg: ExperimentConfig) -> Prepared:
    v = cfg.values
    train, test = _load_data(cfg)
    topology = _topology(cfg)
    K = topology.size if topology is not None else v["topology.K"]
    shards, _ = partition_uniform(train, K, seed=v["data.partition_seed"])
    spec = ObjectiveSpec(v["objective.kind"], v["objective.reg"])
    problem = Federation(spec, shards)
    consts = constants(spec, shards)
    lam = topology.spectral_norm if topology is not None else 0.0

    if v["schedule.kind"] == "fixed":
        schedule = Schedule.fixed(v["schedule.eta"])
    elif v["schedule.kind"] == "diminishing":
        schedule = Schedule.diminishing(v["schedule.delta"], v["schedule.gamma"])
    else:
        schedule = theorem_schedule(consts, problem.m, lam, v["schedule.delta_factor"])
    batch = v["run.batch_size"]
    if batch > problem.sizes.min():
        raise ConfigError(f"run.batch_size {batch} exceeds the smallest shard ({problem.sizes.min()} samples)")
    run_config = RunConfig(
        T=v["run.T"],
        schedule=schedule,
        batch_size=batch,
        C=v["run.C"],
        log_every=v["run.log_every"],
        init=v["run.init"],
        init_scale=v["run.init_scale"],
        rescale_step=v["run.rescale_step"],
    )
    w_star = f_star = None
    if v["analysis.oracle"] or v["analysis.bound_check"]:
        if v["objective.reg"] > 0 or v["objective.kind"] == "ridge":
            w_star = optimum(spec, shards)
            f_star = global_loss(spec, w_star, shards)
    validation = validate_schedule(schedule, consts, problem.m, lam)
    return Prepared(cfg, problem, topology, test, run_config, consts, lam, w_star, f_star, validation)


@dataclass
class ExperimentResult:
    prepared: Prepared
    trace: RunTrace
    traces: list[RunTrace]
    summary: dict
    bound_report: dict | None = None


def _bound_report(prep: Prepared, trace: RunTrace, seeds: list) -> tuple[dict, RunTrace]:
    """Certify the averaged trace against the applicable bound(s)."""
    cfg, problem, rc = prep.config, prep.problem, prep.run_config
    spec = problem.objective
    report: dict = {
        "conditions": prep.schedule_validation.to_dict(),
        "constants": {"L": prep.constants.L, "mu": prep.constants.mu, "lambda": prep.lam, "m": problem.m, "K": problem.K},
        "checks": [],
        "pass": False,
    }
    if prep.w_star is None:
        report["reason"] = "no reference optimum (objective not strongly convex)"
        return report, trace
    batch = rc.batch_size if 0 < rc.batch_size < problem.sizes.min() else 0
    sigma2, chi2 = (0.0, 0.0)
    if batch:
        sigma2, chi2 = estimate_sigma_chi(spec, problem.shards, batch, prep.w_star, cfg["analysis.sigma_draws"])
    else:
        chi2 = max(float(np.sum(full_gradient(spec, prep.w_star, s) ** 2)) for s in problem.shards)
    epsilon, varsigma = heterogeneity_gaps(spec, problem.shards, prep.w_star)
    report["estimates"] = {"sigma2": sigma2, "chi2": chi2, "epsilon": epsilon, "varsigma": varsigma,
                           "note": "sigma2 and chi2 are empirical estimates at the reference optimum"}

    checks = []
    sched = rc.schedule
    if sched.kind == "diminishing":
        starts = np.stack([initial_parameters(rc.init, problem.K, problem.dim, s, rc.init_scale) for s in seeds])
        est = bound_constants(
            BoundEstimates(sigma2, chi2, epsilon, varsigma),
            prep.constants.L, prep.constants.mu, problem.m, problem.K, prep.lam,
            sched.delta, sched.gamma, starts, prep.w_star, cfg["analysis.consensus_term"],
        )
        report["estimates"].update({"zeta": est.zeta, "zeta_tilde": est.zeta_tilde})
        if not est.defined:
            report["reason"] = f"bound undefined: {est.reason}"
            return report, trace
        if not prep.schedule_validation.overall_ok:
            report["warning"] = "schedule violates the step-size conditions; bound shown for reference only"
        b1 = theorem1_bound(est, sched.gamma)
        checks.append(check_bound(trace, b1))
        if prep.topology is not None:
            checks.append(check_bound(trace, consensus_bound(est, sched.gamma)))
        envelope = b1
    else:
        initial = trace.column("loss_mean_iterate")[0]
        b = proposition1_bound(sched.eta, prep.constants.L, prep.constants.mu, sigma2, varsigma, prep.f_star, initial)
        checks.append(check_bound(trace, b))
        envelope = b
    trace = RunTrace(rows=[dict(r) for r in trace.rows], meta=trace.meta, warnings=list(trace.warnings))
    for r in trace.rows:
        r["bound_value"] = envelope(int(r["t"]))
    report["checks"] = [c.to_dict() for c in checks]
    report["pass"] = all(c.passed for c in checks)
    return report, trace


def _final_metrics(trace: RunTrace) -> dict:
    last = trace.rows[-1]
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in last.items()}


def _rate_fits(cfg: ExperimentConfig, trace: RunTrace, gamma_offset: float) -> dict:
    window = cfg["analysis.rate_window"]
    if window is None:
        T = cfg["run.T"]
        window = (max(1.0, T / 100), float(T))
    fits = {}
    for metric in ("dist_to_opt", "consensus_error"):
        try:
            fits[metric] = fit_rate(trace, metric, window).to_dict()
            if gamma_offset:
                fits[metric + "_shifted"] = fit_rate(trace, metric, window, t_offset=gamma_offset).to_dict()
        except ValueError as exc:
            fits[metric] = {"error": str(exc)}
    return fits


def run_experiment(cfg: ExperimentConfig, threads: int = 1, prepared: Prepared | None = None) -> ExperimentResult:
    """Run every seed, average the traces and assemble the summary.

    Raises :class:`~defed.engine.RunError` (carrying the partial trace) when a run diverges.
    """
    prep = prepared if prepared is not None else prepare(cfg)
    seeds = cfg.seeds
    traces = run_seeds(
        cfg["algorithm"], prep.problem, prep.run_config, seeds, threads=threads,
        topology=prep.topology, w_star=prep.w_star, test_data=prep.test_data,
    )
    trace = mean_trace(traces) if len(traces) > 1 else traces[0]
    report = None
    if cfg["analysis.bound_check"]:
        report, trace = _bound_report(prep, trace, seeds)
    sched = prep.run_config.schedule
    task = "mse" if prep.problem.objective.kind == "ridge" else "accuracy"
    summary = {
        "algorithm": cfg["algorithm"],
        "n_seeds": len(seeds),
        "task": task,
        "final": _final_metrics(trace),
        "w_star_loss": prep.f_star,
        "constants": {"L": prep.constants.L, "mu": prep.constants.mu, "lambda": prep.lam,
                      "m": prep.problem.m, "K": prep.problem.K},
        "schedule": sched.to_dict(),
        "schedule_validation": prep.schedule_validation.to_dict(),
        "rate_fits": _rate_fits(cfg, trace, sched.gamma if sched.kind == "diminishing" else 0.0),
        "bound_verdict": None if report is None else report["pass"],
        "warnings": list(trace.warnings),
    }
    if not prep.schedule_validation.overall_ok:
        summary["warnings"].append("schedule fails: " + ", ".join(prep.schedule_validation.failed()))
    return ExperimentResult(prep, trace, traces, summary, report)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _strict(obj):
    # JSON has no NaN or infinity; write them as null
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _strict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_strict(v) for v in obj]
    return obj


def dump_json(data: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(_strict(data), fh, indent=2, default=_json_default, allow_nan=False)
        fh.write("\n")


def write_outputs(result: ExperimentResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trace": out / "trace.csv", "config": out / "config_echo.txt", "summary": out / "summary.json"}
    result.trace.to_csv(paths["trace"])
    paths["config"].write_text(result.prepared.config.echo())
    dump_json(result.summary, paths["summary"])
    if result.bound_report is not None:
        paths["bound"] = out / "bound_check.json"
        dump_json(result.bound_report, paths["bound"])
    return paths
