import copy
import json
from pathlib import Path

import numpy as np
import pytest

import run_zoom_control
from run_zoom_control import main

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


def test_check_two_sensor_scenario(workdir, capsys):
    assert main(["check", "--scenario", str(SCENARIO_DIR / "two_sensor_diag.json")]) == 0
    summary = _stdout_json(capsys)
    assert summary["command"] == "check"
    assert summary["results"]["jointly_observable"] is True
    assert summary["results"]["num_sensors"] == 2
    assert summary["results"]["eigenspace_assignment"]["satisfied"] is True


def test_decompose_reports_rates(workdir, capsys):
    assert main(["decompose", "--scenario", str(SCENARIO_DIR / "two_sensor_diag.json"), "--out", "dec"]) == 0
    results = _stdout_json(capsys)["results"]
    assert results["decreasing_order"] is False
    assert results["sufficient_rate"] == pytest.approx(2.584962500721156)
    assert (workdir / "dec" / "summary.json").exists()


def test_simulate_is_byte_identical(workdir, scalar_scenario_document, write_scenario):
    path = str(write_scenario(scalar_scenario_document))
    for out in ("first", "second"):
        assert main(["simulate", "--scenario", path, "--out", out, "--trials", "2", "--horizon", "10"]) == 0
    for name in ("steps.jsonl", "summary.json"):
        assert (workdir / "first" / name).read_bytes() == (workdir / "second" / name).read_bytes()
    summary = json.loads((workdir / "first" / "summary.json").read_text(encoding="utf-8"))
    assert summary["parameters"]["run"]["trials"] == 2
    assert len(summary["results"]["trials"]) == 2


def test_simulate_csv_format(workdir, scalar_scenario_document, write_scenario):
    path = str(write_scenario(scalar_scenario_document))
    assert main(["simulate", "--scenario", path, "--out", "csv_run", "--format", "csv"]) == 0
    header = (workdir / "csv_run" / "steps.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "step,trial,x_1,delta_1,q_1,b,zoomed"


def test_simulate_aborted_trials_exit_four(workdir, scalar_scenario_document, write_scenario):
    document = copy.deepcopy(scalar_scenario_document)
    document["loop"] = {"horizon": 600, "control": "open"}
    document["run"] = {"trials": 1, "seed": 0}
    assert main(["simulate", "--scenario", str(write_scenario(document)), "--out", "open"]) == 4
    summary = json.loads((workdir / "open" / "summary.json").read_text(encoding="utf-8"))
    assert summary["results"]["aborted_trials"] == [0]


def test_missing_input_matrix_exit_two(workdir, scalar_scenario_document, write_scenario, capsys):
    document = copy.deepcopy(scalar_scenario_document)
    del document["system"]["B"]
    assert main(["check", "--scenario", str(write_scenario(document))]) == 2
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert payload["error"] == "validation"
    assert payload["path"] == "/system/B"


def test_missing_scenario_file_exit_two(workdir, capsys):
    assert main(["check", "--scenario", "nowhere.json"]) == 2
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert payload["error"] == "input"


def test_usage_errors_exit_two_with_payload(workdir, capsys):
    assert main([]) == 2
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert payload["error"] == "input"
    assert payload["path"] == "argv"

    assert main(["simulate", "--scenario", "x.json", "--format", "xml"]) == 2
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "xml" in payload["message"]


def test_linear_algebra_failures_exit_four(workdir, monkeypatch, capsys):
    def singular(args):
        raise np.linalg.LinAlgError("Singular matrix")

    monkeypatch.setitem(run_zoom_control.HANDLERS, "check", singular)
    assert main(["check", "--scenario", "any.json"]) == 4
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert payload == {"error": "numeric", "message": "LinAlgError: Singular matrix"}


def test_rate_writes_table(workdir, scalar_scenario_document, write_scenario):
    assert main(["rate", "--scenario", str(write_scenario(scalar_scenario_document)), "--out", "rates"]) == 0
    lines = (workdir / "rates" / "rates.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "policy,T,R_avg,excess"
    assert len(lines) == 1 + 2 * 6


def test_tailbound_dominates(workdir, scalar_scenario_document, write_scenario, capsys):
    path = str(write_scenario(scalar_scenario_document))
    assert main(["tailbound", "--scenario", path, "--delta", "4.0", "--samples", "20000"]) == 0
    results = _stdout_json(capsys)["results"]
    assert results["dominates"] is True
    assert results["bound"] >= results["empirical"]


def test_tailbound_rejects_wrong_delta_length(workdir, scalar_scenario_document, write_scenario):
    path = str(write_scenario(scalar_scenario_document))
    assert main(["tailbound", "--scenario", path, "--delta", "2.0", "3.0"]) == 2


def test_diagnose_writes_series(workdir, scalar_scenario_document, write_scenario):
    assert main(["diagnose", "--scenario", str(write_scenario(scalar_scenario_document)), "--out", "diag"]) == 0
    for name in ("moments.csv", "tail.csv", "summary.json"):
        assert (workdir / "diag" / name).exists()
    summary = json.loads((workdir / "diag" / "summary.json").read_text(encoding="utf-8"))
    assert summary["results"]["moments"]["verdict"] == "inconclusive"


def test_generate_then_check(workdir, capsys):
    assert main(["generate", "--seed", "3", "--n", "2", "--out", "generated.json"]) == 0
    assert main(["check", "--scenario", "generated.json"]) == 0
    assert _stdout_json(capsys)["results"]["controllable"] is True
