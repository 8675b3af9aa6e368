import csv
import json

import pytest

from jumpfield.cli import load_schema, main


def _run(tmp_path, *args, name="out"):
    out = tmp_path / name
    code = main([*args, "--out", str(out)])
    return code, out


def test_benchmark_A(tmp_path):
    code, out = _run(tmp_path, "benchmark", "--family", "A", "--N", "20000", "--steps", "50", "--seed", "7")
    summary = json.loads((out / "summary.json").read_text())
    assert code == 0
    assert summary["result"]["V0"] == pytest.approx(0.25, abs=0.01) and summary["result"]["pass"] is True
    assert summary["seed"] == 7


def test_solve_decoupled_ratio_column(tmp_path):
    code, out = _run(tmp_path, "solve", "--family", "A", "--N", "2000", "--steps", "10")
    assert code == 0
    rows = list(csv.DictReader(open(out / "diagnostics.csv")))
    ratios = [float(r["ratio"]) for r in rows if r["ratio"]]
    assert ratios and max(ratios) <= 0.05


def test_summary_is_byte_identical(tmp_path):
    args = ("solve", "--family", "C", "--N", "1000", "--steps", "8", "--seed", "3")
    _, a = _run(tmp_path, *args, name="a")
    _, b = _run(tmp_path, *args, "--threads", "3", name="b")
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()


def test_threads_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("JUMPFIELD_THREADS", "2")
    code, out = _run(tmp_path, "solve", "--family", "A", "--N", "500", "--steps", "4")
    assert code == 0


def test_residual_B_points(tmp_path):
    code, out = _run(tmp_path, "residual", "--family", "B", "--points", "10")
    rows = list(csv.DictReader(open(out / "residual.csv")))
    assert len(rows) == 10
    assert all(abs(float(r["total"])) <= 0.05 for r in rows)
    assert code == 0


def test_sensitivity_command(tmp_path):
    code, out = _run(tmp_path, "sensitivity", "--family", "B", "--N", "2000", "--steps", "10", "--v", "0.5")
    summary = json.loads((out / "summary.json").read_text())
    assert code == 0
    assert summary["result"]["dmu"][0]["value"][0] == pytest.approx(1.0, abs=0.05)


def test_config_error_has_json_pointer(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"problem": {"family": "A"}, "numerics": {"steps": 0}}))
    code, _ = _run(tmp_path, "solve", "--config", str(cfg))
    assert code == 2
    assert "/numerics/steps" in capsys.readouterr().err


def test_flag_validation(tmp_path, capsys):
    code, _ = _run(tmp_path, "solve", "--family", "A", "--N", "0")
    assert code == 2 and "/numerics/N" in capsys.readouterr().err


def test_config_file_drives_run(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "problem": {"family": "C", "params": {"kappa": 0.5}, "horizon": 0.25},
        "numerics": {"N": 4000, "steps": 20, "seed": 1},
        "x": [1.0],
    }))
    code, out = _run(tmp_path, "benchmark", "--config", str(cfg))
    assert code == 0
    assert json.loads((out / "summary.json").read_text())["result"]["V0"] == pytest.approx(1.4164, abs=0.02)


def test_solver_error_writes_error_json(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"problem": {"family": "B", "params": {"kappa": 1.0}}}))
    code, out = _run(tmp_path, "solve", "--config", str(cfg))
    err = json.loads((out / "error.json").read_text())
    assert code != 0 and err["error"] == "structural"


def test_benchmark_criterion_table(tmp_path):
    code, out = _run(tmp_path, "benchmark", "--criterion", "10")
    rows = list(csv.DictReader(open(out / "acceptance.csv")))
    assert code == 0 and rows[0]["pass"] == "True"


def test_schema_loads():
    assert load_schema()["properties"]["command"]["enum"][0] == "solve"
