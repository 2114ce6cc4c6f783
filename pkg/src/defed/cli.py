"""Command-line entry point: ``defed run | compare | graph | plot``.

Exit status is 0 on success, 1 when an input fails validation and 2 when a run
fails at runtime (a partial trace is still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import AnalysisError
from .data import DataError
from .engine import TRACE_COLUMNS, EngineError, RunError, RunTrace
from .experiment import ConfigError, dump_json, load_config, run_experiment, write_outputs
from .objective import ObjectiveError
from .plotting import PlotError, graph_svg, line_chart_svg
from .topology import (
    TopologyError,
    TopologyValidationError,
    build_complete_graph,
    build_regular_graph,
    load_matrix,
    validate,
)

log = logging.getLogger("defed")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, TopologyError, DataError, ObjectiveError, EngineError, AnalysisError, PlotError)
COMPARABLE_PREFIXES = ("algorithm", "topology.")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # bad command lines are validation errors, not runtime errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load(path: str, seed: int | None):
    cfg = load_config(path)
    if seed is not None:
        cfg = cfg.with_values(run__seed=seed)
    return cfg


def _flush_partial(exc: RunError, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    exc.trace.to_csv(out / "trace.csv")
    dump_json({"error": str(exc), "partial": True, "rounds_logged": len(exc.trace)}, out / "summary.json")


def cmd_run(args) -> int:
    cfg = _load(args.config, args.seed)
    out = Path(args.out)
    try:
        result = run_experiment(cfg, threads=args.threads)
    except RunError as exc:
        _flush_partial(exc, out)
        (out / "config_echo.txt").write_text(cfg.echo())
        raise
    paths = write_outputs(result, out)
    final = result.summary["final"]
    log.info("%s: %d rounds, %d seed(s)", cfg["algorithm"], cfg["run.T"], result.summary["n_seeds"])
    log.info("final train %s = %.6g, loss = %.6g", result.summary["task"], final["train_metric"], final["loss_mean_iterate"])
    if result.bound_report is not None:
        log.info("bound check: %s", "pass" if result.bound_report["pass"] else "FAIL")
    for w in result.summary["warnings"]:
        log.warning("warning: %s", w)
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def _joint_rows(a: RunTrace, b: RunTrace) -> list[list[float]]:
    ta, tb = a.t, b.t
    if not np.array_equal(ta, tb):
        raise ConfigError("the two runs logged different rounds")
    cols = TRACE_COLUMNS[1:]
    return [[int(t)] + [a.rows[i][c] for c in cols] + [b.rows[i][c] for c in cols] for i, t in enumerate(ta)]


def _delta_block(a: np.ndarray, b: np.ndarray) -> dict:
    d = a - b
    finite = np.isfinite(d)
    if not finite.any():
        return {"final_a": None, "final_b": None, "final_delta": None, "max_abs_delta": None, "min_abs_delta": None}
    return {
        "final_a": float(a[-1]),
        "final_b": float(b[-1]),
        "final_delta": float(d[-1]),
        "max_abs_delta": float(np.max(np.abs(d[finite]))),
        "min_abs_delta": float(np.min(np.abs(d[finite]))),
    }


def cmd_compare(args) -> int:
    cfg_a, cfg_b = _load(args.config_a, args.seed), _load(args.config_b, args.seed)
    bad = [k for k in cfg_a.differing_keys(cfg_b) if not k.startswith(COMPARABLE_PREFIXES)]
    # relative data paths may be spelled differently yet name the same file
    bad = [k for k in bad if not (k.endswith("path") and cfg_a.path(k) and cfg_b.path(k)
                                  and cfg_a.path(k).resolve() == cfg_b.path(k).resolve())]
    if bad:
        raise ConfigError("configs may differ only in algorithm/topology; also differ in: " + ", ".join(bad))
    out = Path(args.out)
    results = []
    for tag, cfg in (("a", cfg_a), ("b", cfg_b)):
        try:
            res = run_experiment(cfg, threads=args.threads)
        except RunError as exc:
            _flush_partial(exc, out / tag)
            raise
        write_outputs(res, out / tag)
        results.append(res)
    a, b = results[0].trace, results[1].trace
    header = ["t"] + [f"{c}_a" for c in TRACE_COLUMNS[1:]] + [f"{c}_b" for c in TRACE_COLUMNS[1:]]
    with open(out / "joint.csv", "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in _joint_rows(a, b):
            fh.write(",".join([str(row[0])] + [f"{float(v):.17g}" for v in row[1:]]) + "\n")
    summary = {
        "a": {"config": str(args.config_a), "algorithm": cfg_a["algorithm"], "topology": results[0].trace.meta["topology"]},
        "b": {"config": str(args.config_b), "algorithm": cfg_b["algorithm"], "topology": results[1].trace.meta["topology"]},
        "task": results[0].summary["task"],
        "deltas": {
            c: _delta_block(a.column(c), b.column(c))
            for c in ("train_metric", "test_metric", "loss_mean_iterate", "dist_to_opt")
        },
    }
    dump_json(summary, out / "delta_summary.json")
    d = summary["deltas"]["train_metric"]
    log.info("final train %s: a = %.6g, b = %.6g, delta = %.3g", summary["task"], d["final_a"], d["final_b"], d["final_delta"])
    log.info("wrote %s", out / "joint.csv")
    return EXIT_OK


def cmd_graph(args) -> int:
    if args.file is not None:
        try:
            W = load_matrix(args.file)
        except TopologyValidationError as exc:
            print(json.dumps({"name": Path(args.file).name, **exc.report.to_dict()}, indent=2))
            raise
    elif args.complete:
        W = build_complete_graph(args.K)
    else:
        W = build_regular_graph(args.K, args.l)
    report = validate(W.weights, W.tol)
    text = json.dumps({"name": W.name, "size": W.size, **report.to_dict()}, indent=2)
    print(text)
    if args.svg:
        Path(args.svg).write_text(graph_svg(W))
        log.info("wrote %s", args.svg)
    return EXIT_OK


def cmd_plot(args) -> int:
    labels = args.labels or [Path(p).parent.name or Path(p).stem for p in args.traces]
    if len(labels) != len(args.traces):
        raise PlotError(f"got {len(labels)} labels for {len(args.traces)} traces")
    series = []
    for path, label in zip(args.traces, labels):
        trace = RunTrace.from_csv(path)
        try:
            y = trace.column(args.metric)
        except KeyError as exc:
            raise PlotError(exc.args[0]) from None
        series.append((label, trace.t, y))
    svg = line_chart_svg(series, title=args.title or args.metric, ylabel=args.metric, logx=args.log, logy=args.log)
    Path(args.out).write_text(svg)
    log.info("wrote %s", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides run.seed)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads; never changes results")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="only print errors")

    parser = _Parser(prog="defed", description="Simulate decentralized federated averaging on linear models.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", parents=[common], help="run one experiment config")
    p.add_argument("config")
    p.add_argument("-o", "--out", default="out", help="output directory (default: out)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", parents=[common], help="run two configs and report their differences")
    p.add_argument("config_a")
    p.add_argument("config_b")
    p.add_argument("-o", "--out", default="compare_out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("graph", parents=[common], help="build or load a mixing matrix and report its properties")
    p.add_argument("--K", type=int, default=10, help="number of clients")
    p.add_argument("--l", type=int, default=2, help="degree of the regular ring")
    p.add_argument("--complete", action="store_true", help="complete graph instead of a ring")
    p.add_argument("--file", help="CSV mixing matrix to validate instead")
    p.add_argument("--svg", help="also draw the graph to this SVG file")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("plot", parents=[common], help="plot one trace column from one or more trace.csv files")
    p.add_argument("traces", nargs="+")
    p.add_argument("-m", "--metric", default="train_metric")
    p.add_argument("-o", "--out", default="plot.svg")
    p.add_argument("--log", action="store_true", help="log-log axes")
    p.add_argument("--labels", nargs="+", help="legend labels, one per trace")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    args.seed = getattr(args, "seed", None)
    args.threads = getattr(args, "threads", 1)
    args.quiet = getattr(args, "quiet", False)
    logging.basicConfig(format="%(message)s", level=logging.WARNING if args.quiet else logging.INFO, force=True)
    if args.threads < 1:
        print("defed: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except RunError as exc:
        print(f"defed: run failed: {exc} (partial trace written)", file=sys.stderr)
        return EXIT_RUNTIME
    except VALIDATION_ERRORS as exc:
        print(f"defed: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"defed: I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
