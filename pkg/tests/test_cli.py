import json
import math

import pytest
from pydantic import ValidationError

import bench_agent
from cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from plant import ConstraintViolation
from report_agent import CompareError, compare_documents, load_run_document, render_table
from run_config import RunConfig, load_run_config, parse_seeds

SHORT_RUN = [
    "--task", "position_reach", "--horizon-t", "6", "--horizon-unit", "steps", "--m-smooth", "2",
    "--m-triggered", "4", "--duration", "8", "--terminal-samples", "50",
]


def _doc(controller, task="position_reach", mean=0.1, error=1.0):
    return {
        "controller": controller, "task": task,
        "solve_time_stats": {"mean": mean, "max": 2 * mean, "total": 10 * mean, "count": 10.0},
        "metrics": {"final_position_error": error, "rms_tracking_error": error, "cumulative_cost": 5.0,
                    "max_constraint_violation": 0.0, "tube_containment_rate": 1.0},
    }


# ----- configuration -----

@pytest.mark.parametrize("raw, expected", [
    ("0,3,7", [0, 3, 7]),
    ("0-4", [0, 1, 2, 3, 4]),
    ("2, 5-6", [2, 5, 6]),
    (5, [5]),
    ([1, 2], [1, 2]),
])
def test_parse_seeds(raw, expected):
    assert parse_seeds(raw) == expected


def test_run_config_validation():
    cfg = RunConfig(controllers="smooth,ideal", seeds="0-2")
    assert cfg.controllers == ["smooth", "ideal"]
    assert cfg.seeds == [0, 1, 2]
    assert cfg.horizon().N == 30
    with pytest.raises(ValidationError):
        RunConfig(controllers="smooth,mystery")
    with pytest.raises(ValidationError):
        RunConfig(horizon_span=3)
    with pytest.raises(ValidationError):
        RunConfig(seeds="")


def test_run_config_builds_domain_objects():
    cfg = RunConfig(eta1=0.02, input_limit=0.1, duration=40, line_end="4,5")
    assert cfg.plant().eta1 == 0.02
    assert cfg.plant().input_box.hi.tolist() == [0.1, 0.1, 0.1]
    task = cfg.make_task("trajectory_track")
    assert task.duration == 40
    assert task.line_end == (4.0, 5.0)
    assert "output_dir" not in cfg.summary()


def test_run_config_angle_box():
    cfg = RunConfig()
    assert cfg.plant().state_box.lo[2:] == pytest.approx([math.pi / 2, 0.0, 0.0])
    assert cfg.plant().state_box.hi[2:] == pytest.approx([math.pi, math.pi, math.pi / 2])
    assert math.isinf(cfg.plant().state_box.hi[0])
    wide = RunConfig(theta_lower="1.0,-0.5,-0.5", theta_upper="3.5,3.5,2.0")
    box = wide.plant().state_box
    assert box.lo.tolist() == [-math.inf, -math.inf, 1.0, -0.5, -0.5]
    assert box.hi[2:].tolist() == [3.5, 3.5, 2.0]
    assert wide.summary()["theta_upper"] == [3.5, 3.5, 2.0]
    with pytest.raises(ValidationError):
        RunConfig(theta_lower="2.0,0,0", theta_upper="1.0,3,1")
    # the reach pose must sit inside the configured box
    with pytest.raises(ConstraintViolation):
        RunConfig(theta_upper="2.0,3.0,1.5").make_task()


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("TASK=trajectory_track\nSEEDS=1-2\nM_SMOOTH=2\nETA1=0.005\n")
    cfg = load_run_config(path, {"seeds": "7", "duration": None})
    assert cfg.task.value == "trajectory_track"
    assert cfg.seeds == [7]
    assert cfg.m_smooth == 2
    assert cfg.eta1 == 0.005
    with pytest.raises(FileNotFoundError):
        load_run_config(tmp_path / "missing.env")


# ----- comparison -----

def test_compare_against_baseline():
    docs = [_doc("triggered", mean=0.4), _doc("triggered", mean=0.6), _doc("smooth", mean=0.05, error=0.2)]
    report = compare_documents(docs)
    assert report.baseline == "triggered"
    assert report.row("triggered").percentage == pytest.approx(100.0)
    assert report.row("triggered").runs == 2
    assert report.row("smooth").percentage == pytest.approx(10.0)
    assert report.row("smooth").final_position_error == pytest.approx(0.2)
    assert "10.0%" in render_table(report)


def test_compare_rejects_bad_input():
    with pytest.raises(CompareError):
        compare_documents([_doc("smooth")])
    with pytest.raises(CompareError):
        compare_documents([_doc("smooth"), _doc("triggered", task="trajectory_track")])
    with pytest.raises(CompareError):
        compare_documents([_doc("smooth"), _doc("triggered")], baseline="ideal")
    with pytest.raises(CompareError):
        compare_documents([_doc("smooth"), {"task": "position_reach"}])


def test_compare_without_baseline_time_reports_no_percentage():
    report = compare_documents([_doc("triggered", mean=0.0), _doc("smooth", mean=0.1)])
    assert report.row("smooth").percentage is None
    assert "n/a" in render_table(report)


def test_load_run_document_merges_timing(tmp_path):
    doc = _doc("smooth")
    stats = doc.pop("solve_time_stats")
    (tmp_path / "metrics.json").write_text(json.dumps(doc))
    (tmp_path / "timing.json").write_text(json.dumps({"solve_time_stats": stats}))
    assert load_run_document(tmp_path)["solve_time_stats"] == stats
    with pytest.raises(FileNotFoundError):
        load_run_document(tmp_path / "nope")


# ----- command line -----

def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["run", "--controllers", "smooth,mystery", "--output-dir", str(tmp_path)]) == EXIT_USAGE
    assert main(["run", "--config", str(tmp_path / "missing.env")]) == EXIT_USAGE
    assert main(["run", "--task", "orbit"]) == EXIT_USAGE
    assert main(["compare", str(tmp_path / "nothing")]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK
    capsys.readouterr()


def test_compare_command_mixed_tasks_exit_2(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps(_doc("smooth")))
    b.write_text(json.dumps(_doc("triggered", task="trajectory_track")))
    assert main(["compare", str(a), str(b)]) == EXIT_USAGE


def test_compare_command_same_file_twice(tmp_path, capsys):
    a = tmp_path / "a.json"
    a.write_text(json.dumps(_doc("smooth")))
    out = tmp_path / "report" / "cmp.json"
    assert main(["compare", str(a), str(a), "--json", "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert report["rows"][0]["percentage"] == pytest.approx(100.0)
    assert json.loads(capsys.readouterr().out) == report


@pytest.mark.slow
def test_run_writes_artefacts_and_is_reproducible(tmp_path, capsys):
    out1, out2 = tmp_path / "one", tmp_path / "two"
    args = ["run", *SHORT_RUN, "--controllers", "triggered,smooth", "--seeds", "0"]
    assert main([*args, "--output-dir", str(out1)]) == EXIT_OK
    assert main([*args, "--output-dir", str(out2), "--workers", "2"]) == EXIT_OK

    run = out1 / "position_reach" / "smooth" / "seed_0"
    for name in ("trace.csv", "metrics.json", "timing.json"):
        assert (run / name).is_file()
    assert not list(run.glob("*.tmp"))
    doc = json.loads((run / "metrics.json").read_text())
    assert doc["steps"] == 8
    assert doc["design"]["eta1"] == 0.01
    assert doc["metrics"]["max_constraint_violation"] == 0.0
    for ctrl in ("triggered", "smooth"):
        rel = f"position_reach/{ctrl}/seed_0/metrics.json"
        assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes()

    capsys.readouterr()
    assert main(["compare", str(out1 / "position_reach" / "smooth" / "seed_0"),
                 str(out1 / "position_reach" / "triggered" / "seed_0"), "--json"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["baseline"] == "triggered"
    assert {r["controller"] for r in report["rows"]} == {"smooth", "triggered"}


@pytest.mark.slow
def test_run_without_trace(tmp_path):
    args = ["run", *SHORT_RUN, "--controllers", "smooth", "--no-trace", "--output-dir", str(tmp_path)]
    assert main(args) == EXIT_OK
    run = tmp_path / "position_reach" / "smooth" / "seed_0"
    assert (run / "metrics.json").is_file()
    assert not (run / "trace.csv").exists()


def test_failed_job_exits_1(tmp_path, monkeypatch):
    def boom(*_args, **_kwargs):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(bench_agent, "simulate", boom)
    args = ["run", *SHORT_RUN, "--controllers", "smooth", "--output-dir", str(tmp_path)]
    assert main(args) == EXIT_FAILED
