import csv
import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from eigenbranch.cli import CSV_COLUMNS, main, run, sweep
from eigenbranch.scenario import ScenarioError, load_scenario, parse_scenario

ASYM = {
    "name": "asym",
    "geometry": {"n_points": 128},
    "builtin": {"v": "poly_trig:0.52,-0.02,0,-0.5"},
    "tgrid": {"t_min": 0, "t_max": 6, "base_steps": 24},
    "track": {"k": 3},
}


def small(name="constant", **over):
    return load_scenario(name).with_overrides(**over)


@pytest.fixture(scope="module")
def constant_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("constant")
    return run(small(n_points=64, t_max=20), out), out


def test_run_writes_artifacts(constant_out):
    res, out = constant_out
    assert res.exit_code == 0
    assert {p.name for p in out.iterdir()} == {"branches.csv", "report.json", "summary.txt"}
    assert "verdict: PASS" in (out / "summary.txt").read_text()


def test_branches_csv_format(constant_out):
    _, out = constant_out
    raw = (out / "branches.csv").read_bytes()
    assert b"\r" not in raw
    rows = list(csv.reader(raw.decode().splitlines()))
    assert tuple(rows[0]) == CSV_COLUMNS
    res_rows = rows[1:]
    assert {r[0] for r in res_rows} == {str(j) for j in range(6)}
    t = np.array([float(r[1]) for r in res_rows if r[0] == "0"])
    lam = np.array([float(r[2]) for r in res_rows if r[0] == "0"])
    for r in res_rows[:50]:
        assert all(v == "%.17g" % float(v) for v in r[1:])
    np.testing.assert_allclose(lam, lam[0] + t**2, rtol=1e-10)
    assert res_rows[0][4] == "nan"  # t = 0 has no scaled energy


def test_report_validates_against_schema(constant_out, report_schema):
    _, out = constant_out
    rep = json.loads((out / "report.json").read_text())
    jsonschema.validate(rep, report_schema)
    assert rep["complete"] and rep["passed"]
    assert rep["scenario"]["name"] == "constant"


def test_run_is_deterministic(tmp_path):
    s = small(n_points=64, t_max=20)
    run(s, tmp_path / "a")
    run(s, tmp_path / "b")
    for name in ("branches.csv", "report.json", "summary.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_failed_expectation_exits_1(tmp_path):
    d = dict(ASYM, expect=[{"quantity": "mu", "branch": 0, "target": 5, "abs_tol": 0.1}])
    res = run(parse_scenario(json.dumps(d)), tmp_path)
    assert res.exit_code == 1 and not res.report["passed"]
    assert "FAIL  expect_mu" in (tmp_path / "summary.txt").read_text()


def test_strict_promotes_conjecture_gap(tmp_path):
    s = parse_scenario(json.dumps(dict(ASYM, geometry={"n_points": 256}, tgrid={"t_max": 24, "base_steps": 48})))
    relaxed, strict = run(s, tmp_path / "r"), run(s, tmp_path / "s", strict=True)
    gaps = [b["conjecture_gap"] for b in relaxed.report["branches"]]
    assert max(gaps) > 0.03  # the shallow well at pi hosts branch 1
    assert relaxed.exit_code == 0 and strict.exit_code == 1
    failing = [c for c in strict.report["checks"] if not c["passed"] and c["asserted"]]
    assert {c["name"] for c in failing} == {"conjecture_gap"}


def test_horizon_below_floor_aborts(tmp_path):
    res = run(small(n_points=32, t_max=8), tmp_path)
    assert res.exit_code == 3 and not res.report["complete"]


def test_abort_writes_partial_report(tmp_path, report_schema):
    d = dict(ASYM, diagnostics={"tn_count": 500})
    res = run(parse_scenario(json.dumps(d)), tmp_path)
    assert res.exit_code == 3
    rep = json.loads((tmp_path / "report.json").read_text())
    jsonschema.validate(rep, report_schema)
    assert rep["complete"] is False and "InsufficientSamples" in rep["error"]
    assert "ABORTED" in (tmp_path / "summary.txt").read_text()


def test_nan_written_as_null(tmp_path):
    res = run(small(n_points=64, t_max=20), tmp_path)
    text = (tmp_path / "report.json").read_text()
    assert "NaN" not in text and "Infinity" not in text
    assert res.report["branches"][0]["critical_value_gap"] is not None


def test_witten_report_has_supersymmetry(tmp_path):
    s = parse_scenario(json.dumps({
        "geometry": {"n_points": 128}, "witten": {"f": "cos", "degree": 1},
        "tgrid": {"t_max": 24, "base_steps": 48}, "track": {"k": 4},
    }))
    rep = run(s, tmp_path).report
    assert [e["t"] for e in rep["supersymmetry"]] == [10.0, 20.0]
    assert all(e["gap"] <= e["tolerance"] for e in rep["supersymmetry"])


# ---- sweep -----------------------------------------------------------------

def test_sweep_t_max(tmp_path):
    rows = sweep(small(n_points=64), "t_max", [20.0, 40.0], tmp_path)
    assert [r["status"] for r in rows] == ["complete", "complete"]
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "param,value,status,exit_code,mu,omega,fit_residual,passed"
    assert len(lines) == 3
    assert (tmp_path / "t_max-20" / "report.json").exists()


def test_sweep_empty_values(tmp_path):
    with pytest.raises(ScenarioError):
        sweep(small(), "t_max", [], tmp_path)


def test_sweep_unknown_param(tmp_path):
    with pytest.raises(ScenarioError):
        sweep(small(), "tau", [0.5], tmp_path)


def test_sweep_continues_after_row_failure(tmp_path):
    rows = sweep(small(t_max=20), "n_points", [4, 64], tmp_path)
    assert [r["status"] for r in rows] == ["failed", "complete"]
    assert rows[0]["exit_code"] == 2 and rows[1]["mu"] == pytest.approx(1.0, abs=1e-6)


# ---- command line ----------------------------------------------------------

def test_main_run(tmp_path, capsys):
    code = main(["run", "--scenario", "constant", "--n", "64", "--t-max", "20", "--k", "3", "--out", str(tmp_path)])
    assert code == 0
    assert "verdict: PASS" in capsys.readouterr().out
    assert json.loads((tmp_path / "report.json").read_text())["scenario"]["track"]["k"] == 3


def test_main_bad_scenario(tmp_path, capsys):
    assert main(["run", "--scenario", "no-such-thing", "--out", str(tmp_path)]) == 2
    assert main(["run", "--scenario", "constant", "--n", "4", "--out", str(tmp_path)]) == 2
    assert "geometry.n_points" in capsys.readouterr().err


def test_main_sweep_bad_values(tmp_path):
    assert main(["sweep", "--scenario", "constant", "--param", "k", "--values", ",", "--out", str(tmp_path)]) == 2
    assert main(["sweep", "--scenario", "constant", "--param", "k", "--values", "a,b", "--out", str(tmp_path)]) == 2


def test_main_rejects_unknown_param(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["sweep", "--scenario", "constant", "--param", "tau", "--values", "1", "--out", str(tmp_path)])
    assert info.value.code == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "eigenbranch", "run", "--scenario", "constant", "--n", "64",
         "--t-max", "8", "--k", "2", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "branches.csv").exists()
