import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from defed.cli import main
from defed.data import generate_classification, save_csv_dataset
from defed.engine import RunTrace
from defed.experiment import ConfigError, load_config, parse_config
from defed.topology import build_regular_graph, save_matrix

CLASSIFICATION = """
algorithm = defed
topology.kind = regular
topology.K = 10
topology.l = 2
objective.kind = logistic
objective.reg = 0.1
data.source = synthetic-classification
data.n_samples = 1000
data.dim = 4
data.n_test = 200
schedule.kind = fixed
schedule.eta = 0.1
run.T = 150
run.batch_size = 64 # per client
run.log_every = 10
"""

REGRESSION = """
algorithm = defed
topology.K = 10
topology.l = 2
objective.kind = ridge
data.source = synthetic-regression
data.n_samples = 1000
data.n_test = 200
schedule.kind = fixed
schedule.eta = 0.1
run.T = 100
run.batch_size = 16
run.log_every = 5
"""


def write(tmp_path, text, name="c.txt"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def svg_polylines(path):
    root = ET.parse(path).getroot()
    return [e for e in root.iter() if e.tag.endswith("polyline")]


# ---- config parsing ------------------------------------------------------


def test_parse_defaults_and_comments():
    cfg = parse_config("# only a comment\n\nrun.T = 5\n")
    assert cfg["run.T"] == 5 and cfg["algorithm"] == "defed" and cfg["topology.l"] == 2


@pytest.mark.parametrize(
    "text",
    ["bogus.key = 1", "run.T = 1\nrun.T = 2", "run.T = abc", "run.T", "run.T = ", "run.T = 0",
     "algorithm = sgd", "analysis.bound_check = maybe", "run.C = 1.5", "objective.feature_map = cubic",
     "topology.kind = file", "data.source = csv", "data.source = synthetic-classification"],
)
def test_parse_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_echo_is_reparseable(tmp_path):
    cfg = parse_config(CLASSIFICATION)
    again = parse_config(cfg.echo())
    assert again.values == cfg.values


def test_seed_list_and_count():
    assert parse_config("run.seeds = 3\nrun.seed = 9").seeds == [(9, 0), (9, 1), (9, 2)]
    assert parse_config("run.seeds = 4, 5").seeds == [4, 5]
    assert len(parse_config("run.seeds = 2\nanalysis.bound_check = on\nanalysis.n_seeds = 6").seeds) == 6


def test_relative_paths_resolve_against_config(tmp_path):
    save_matrix(build_regular_graph(10, 2), tmp_path / "w.csv")
    p = write(tmp_path, "topology.kind = file\ntopology.path = w.csv\n")
    assert load_config(p).path("topology.path") == tmp_path / "w.csv"


# ---- run -----------------------------------------------------------------


def test_run_classification_reports_accuracy(tmp_path):
    cfg = write(tmp_path, CLASSIFICATION)
    assert main(["--quiet", "run", cfg, "-o", str(tmp_path / "out")]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["task"] == "accuracy"
    assert 0.9 <= summary["final"]["train_metric"] <= 1.0
    assert 0.9 <= summary["final"]["test_metric"] <= 1.0
    assert summary["schedule_validation"]["overall_ok"] is True
    assert (tmp_path / "out" / "config_echo.txt").exists()
    header = (tmp_path / "out" / "trace.csv").read_text().splitlines()[0]
    assert header == "t,eta,consensus_error,dist_to_opt,loss_mean_iterate,train_metric,test_metric,bound_value"


def test_run_t0_rejected(tmp_path, capsys):
    cfg = write(tmp_path, REGRESSION.replace("run.T = 100", "run.T = 0"))
    assert main(["run", cfg, "-o", str(tmp_path / "out")]) == 1
    assert "run.T" in capsys.readouterr().err


def test_run_is_deterministic_across_threads(tmp_path):
    cfg = write(tmp_path, REGRESSION + "run.seeds = 4\nrun.init = random\n")
    assert main(["--quiet", "--seed", "11", "run", cfg, "-o", str(tmp_path / "a")]) == 0
    assert main(["--quiet", "--threads", "8", "--seed", "11", "run", cfg, "-o", str(tmp_path / "b")]) == 0
    assert main(["--quiet", "run", cfg, "-o", str(tmp_path / "c"), "--seed", "12"]) == 0
    a, b, c = ((tmp_path / d / "trace.csv").read_bytes() for d in "abc")
    assert a == b and a != c


def test_schedule_block_present_on_warning(tmp_path):
    cfg = write(tmp_path, REGRESSION.replace("schedule.eta = 0.1", "schedule.eta = 0.2"))
    assert main(["--quiet", "run", cfg, "-o", str(tmp_path / "out")]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["schedule_validation"]["fixed_rate"] is False
    assert any("schedule" in w for w in summary["warnings"])


def test_runtime_failure_exit_2_with_partial_trace(tmp_path):
    cfg = write(tmp_path, REGRESSION.replace("schedule.eta = 0.1", "schedule.eta = 400").replace("run.T = 100", "run.T = 3000"))
    assert main(["--quiet", "run", cfg, "-o", str(tmp_path / "out")]) == 2
    trace = RunTrace.from_csv(tmp_path / "out" / "trace.csv")
    assert len(trace) >= 1
    assert json.loads((tmp_path / "out" / "summary.json").read_text())["partial"] is True


def test_bound_check_report(tmp_path):
    text = REGRESSION.replace("schedule.kind = fixed", "schedule.kind = theorem") + (
        "analysis.bound_check = on\nanalysis.n_seeds = 3\nanalysis.sigma_draws = 200\nrun.init = random\n"
    )
    cfg = write(tmp_path, text)
    assert main(["--quiet", "run", cfg, "-o", str(tmp_path / "out")]) == 0
    report = json.loads((tmp_path / "out" / "bound_check.json").read_text())
    assert set(report) >= {"conditions", "constants", "checks", "pass", "estimates"}
    assert report["conditions"]["overall_ok"] is True
    kinds = [c["kind"] for c in report["checks"]]
    assert kinds == ["theorem1", "consensus"]
    assert all("margin" in r for r in report["checks"][0]["rounds"])
    trace = RunTrace.from_csv(tmp_path / "out" / "trace.csv")
    assert np.all(np.isfinite(trace.column("bound_value")))


def test_fixed_schedule_bound_check_uses_proposition1(tmp_path):
    cfg = write(tmp_path, REGRESSION + "analysis.bound_check = on\nanalysis.n_seeds = 2\nanalysis.sigma_draws = 100\n")
    assert main(["--quiet", "run", cfg, "-o", str(tmp_path / "out")]) == 0
    report = json.loads((tmp_path / "out" / "bound_check.json").read_text())
    assert [c["kind"] for c in report["checks"]] == ["proposition1"]


def test_run_from_csv_data(tmp_path):
    save_csv_dataset(generate_classification(800, dim=4, seed=1), tmp_path / "d.csv")
    text = CLASSIFICATION.replace("data.source = synthetic-classification", "data.source = csv\ndata.path = d.csv")
    text = text.replace("data.n_test = 200", "data.test_path = d.csv")
    cfg = write(tmp_path, text)
    assert main(["--quiet", "run", cfg, "-o", str(tmp_path / "out")]) == 0


def test_fedavg_partial_participation_run(tmp_path):
    cfg = write(tmp_path, REGRESSION.replace("algorithm = defed", "algorithm = fedavg") + "run.C = 0.5\n")
    assert main(["--quiet", "run", cfg, "-o", str(tmp_path / "out")]) == 0


# ---- compare -------------------------------------------------------------


def test_compare_defed_fedavg(tmp_path):
    a = write(tmp_path, CLASSIFICATION, "a.txt")
    b = write(tmp_path, CLASSIFICATION.replace("algorithm = defed", "algorithm = fedavg"), "b.txt")
    assert main(["--quiet", "compare", a, b, "-o", str(tmp_path / "cmp")]) == 0
    summary = json.loads((tmp_path / "cmp" / "delta_summary.json").read_text())
    d = summary["deltas"]["train_metric"]
    assert d["final_delta"] == pytest.approx(d["final_a"] - d["final_b"])
    header = (tmp_path / "cmp" / "joint.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "t" and "train_metric_a" in header and "train_metric_b" in header
    RunTrace.from_csv(tmp_path / "cmp" / "a" / "trace.csv")


def test_compare_identical_configs_zero_delta(tmp_path):
    a = write(tmp_path, REGRESSION, "a.txt")
    assert main(["--quiet", "compare", a, a, "-o", str(tmp_path / "cmp")]) == 0
    deltas = json.loads((tmp_path / "cmp" / "delta_summary.json").read_text())["deltas"]
    assert deltas["train_metric"]["max_abs_delta"] == 0.0
    assert deltas["loss_mean_iterate"]["max_abs_delta"] == 0.0


def test_compare_topology_change_allowed(tmp_path):
    a = write(tmp_path, REGRESSION, "a.txt")
    b = write(tmp_path, REGRESSION.replace("topology.l = 2", "topology.l = 6"), "b.txt")
    assert main(["--quiet", "compare", a, b, "-o", str(tmp_path / "cmp")]) == 0


def test_compare_mismatched_data_rejected(tmp_path, capsys):
    a = write(tmp_path, REGRESSION, "a.txt")
    b = write(tmp_path, REGRESSION + "data.seed = 5\n", "b.txt")
    assert main(["compare", a, b, "-o", str(tmp_path / "cmp")]) == 1
    assert "data.seed" in capsys.readouterr().err


# ---- graph ---------------------------------------------------------------


def test_graph_regular(capsys, tmp_path):
    assert main(["--quiet", "graph", "--K", "10", "--l", "4", "--svg", str(tmp_path / "g.svg")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["connected"] and report["lambda"] is not None
    root = ET.parse(tmp_path / "g.svg").getroot()
    circles = [e for e in root.iter() if e.tag.endswith("circle")]
    edges = [e for e in root.iter() if e.tag.endswith("line")]
    assert len(circles) == 10 and len(edges) == 20


def test_graph_ring_lambda_printed(capsys):
    assert main(["graph", "--K", "10", "--l", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["lambda"] == pytest.approx(0.8727, abs=5e-5)


def test_graph_disconnected_file(tmp_path, capsys):
    W = np.zeros((6, 6))
    W[:3, :3] = build_regular_graph(3, 2).weights
    W[3:, 3:] = build_regular_graph(3, 2).weights
    np.savetxt(tmp_path / "w.csv", W, delimiter=",")
    assert main(["graph", "--file", str(tmp_path / "w.csv")]) == 1
    captured = capsys.readouterr()
    assert json.loads(captured.out)["connected"] is False


def test_graph_bad_degree():
    assert main(["graph", "--K", "10", "--l", "3"]) == 1


# ---- plot ----------------------------------------------------------------


@pytest.fixture
def traces(tmp_path):
    paths = []
    for l in (2, 4, 6, 8):
        cfg = write(tmp_path, REGRESSION.replace("topology.l = 2", f"topology.l = {l}"), f"c{l}.txt")
        out = tmp_path / f"l{l}"
        assert main(["--quiet", "run", cfg, "-o", str(out)]) == 0
        paths.append(str(out / "trace.csv"))
    return paths


def test_plot_single_and_multi(tmp_path, traces):
    assert main(["--quiet", "plot", traces[0], "-m", "train_metric", "-o", str(tmp_path / "one.svg")]) == 0
    assert len(svg_polylines(tmp_path / "one.svg")) == 1
    assert main(["--quiet", "plot", *traces, "-m", "train_metric", "-o", str(tmp_path / "four.svg"),
                 "--labels", "l=2", "l=4", "l=6", "l=8"]) == 0
    lines = svg_polylines(tmp_path / "four.svg")
    assert len(lines) == 4 and len({e.get("stroke") for e in lines}) == 4


def test_plot_log_axes(tmp_path, traces):
    assert main(["--quiet", "plot", traces[0], "-m", "consensus_error", "--log", "-o", str(tmp_path / "log.svg")]) == 0


def test_plot_metric_typo(tmp_path, traces, capsys):
    assert main(["plot", traces[0], "-m", "train_metrc", "-o", str(tmp_path / "x.svg")]) == 1
    err = capsys.readouterr().err
    assert "available" in err and "train_metric" in err


def test_plot_missing_file(tmp_path):
    assert main(["--quiet", "plot", str(tmp_path / "nope.csv")]) == 2


def test_usage_error_exit_1():
    assert main(["run"]) == 1
    assert main([]) == 1
