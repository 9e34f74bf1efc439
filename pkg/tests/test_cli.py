"""Command line and scenario plumbing tests.

These drive the real entry point through main() with temp directories,
checking artifact layout, exit codes, determinism, and the report table.
Numerical behavior of the probes themselves is covered elsewhere; here the
bundled zero_case scenario doubles as a fast end-to-end fixture.
"""
from __future__ import annotations

import csv
import json

import pytest

from regprobe.cli import main
from regprobe.scenarios import bundled_names, load_scenario, run_scenario

GOLDEN = "tests/golden/zero_case_report.json"


def write_scenario(tmp_path, name="custom", **overrides):
    doc = {
        "v": 1,
        "id": name,
        "mode": "c1",
        "problem": "zero_case",
        "iteration": {"K": 2},
    }
    doc.update(overrides)
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(doc))
    return path


def test_bundled_names_cover_the_shipped_set():
    names = bundled_names()
    for expected in ("zero_case", "drift_c1", "cubic_c11", "nondini_c11",
                     "drift_c1_numeric", "lemma25_sweep",
                     "solver_validation", "modulus_check"):
        assert expected in names


def test_run_bundled_zero_case(tmp_path, capsys):
    code = main(["run", "zero_case", "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "zero_case: C1_certified" in out
    report = json.loads((tmp_path / "zero_case_report.json").read_text())
    assert report["verdict"] == "C1_certified"
    with (tmp_path / "zero_case_trace.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 7
    assert all(float(r["M_k"]) <= 1e-8 for r in rows)


def test_run_matches_golden_report(tmp_path):
    assert main(["run", "zero_case", "--out", str(tmp_path)]) == 0
    fresh = json.loads((tmp_path / "zero_case_report.json").read_text())
    golden = json.loads(open(GOLDEN).read())
    assert fresh == golden


def test_rerun_bit_reproduces_traces(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "zero_case", "--out", str(a)]) == 0
    assert main(["run", "zero_case", "--out", str(b)]) == 0
    assert (a / "zero_case_trace.csv").read_bytes() == \
        (b / "zero_case_trace.csv").read_bytes()
    assert not list(a.glob("*.tmp"))


def test_run_scenario_file_with_output_dir_key(tmp_path):
    target = tmp_path / "nested" / "deeper"
    path = write_scenario(tmp_path, output_dir=str(target))
    assert main(["run", str(path)]) == 0
    assert (target / "custom_report.json").exists()
    assert (target / "custom_trace.csv").exists()


def test_unknown_problem_exits_3_without_outputs(tmp_path, capsys):
    path = write_scenario(tmp_path, problem="not_a_problem")
    out_dir = tmp_path / "out"
    code = main(["run", str(path), "--out", str(out_dir)])
    assert code == 3
    assert "not_a_problem" in capsys.readouterr().err
    assert not out_dir.exists()


def test_unknown_bundled_id_exits_3(capsys):
    assert main(["run", "no_such_scenario"]) == 3
    assert "bundled" in capsys.readouterr().err


def test_invalid_json_exits_2_with_position(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{"v": 1,\n  "id": oops}')
    assert main(["run", str(path)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_unknown_key_exits_2(tmp_path, capsys):
    path = write_scenario(tmp_path, surprise=True)
    assert main(["run", str(path)]) == 2
    assert "surprise" in capsys.readouterr().err


def test_schema_version_mismatch_exits_2(tmp_path):
    path = write_scenario(tmp_path, v=99)
    assert main(["run", str(path)]) == 2


def test_bad_iteration_block_exits_2(tmp_path, capsys):
    path = write_scenario(tmp_path, iteration={"lam": 0.3})
    assert main(["run", str(path)]) == 2
    assert "iteration" in capsys.readouterr().err


def test_usage_error_exits_2():
    assert main(["frobnicate"]) == 2
    assert main([]) == 2


def test_strict_flags_failed_verdict(tmp_path):
    assert main(["run", "nondini_c11", "--out", str(tmp_path)]) == 0
    assert main(["--strict", "run", "nondini_c11",
                 "--out", str(tmp_path)]) == 1


def test_run_parallel_scenarios(tmp_path):
    code = main(["run", "zero_case", "drift_c1", "--out", str(tmp_path),
                 "--threads", "2"])
    assert code == 0
    assert (tmp_path / "zero_case_report.json").exists()
    assert (tmp_path / "drift_c1_report.json").exists()


def test_report_table_sorted_by_verdict_then_id(tmp_path, capsys):
    assert main(["run", "zero_case", "nondini_c11",
                 "--out", str(tmp_path)]) == 0
    code = main(["report", str(tmp_path), "--out", str(tmp_path)])
    assert code == 0
    capsys.readouterr()
    with (tmp_path / "summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["scenario_id"] for r in rows] == ["zero_case", "nondini_c11"]
    assert rows[0]["verdict"] == "C1_certified"
    assert rows[1]["verdict"] == "failed"
    assert rows[0]["worst_margin"] == "inf"
    assert main(["--strict", "report", str(tmp_path),
                 "--out", str(tmp_path)]) == 1


def test_report_accepts_single_file(tmp_path, capsys):
    assert main(["run", "zero_case", "--out", str(tmp_path)]) == 0
    code = main(["report", str(tmp_path / "zero_case_report.json"),
                 "--out", str(tmp_path)])
    assert code == 0
    assert "C1_certified" in capsys.readouterr().out


def test_report_empty_directory_exits_2(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", str(empty)]) == 2
    assert "no report files" in capsys.readouterr().err


def test_report_rejects_schema_mismatch(tmp_path, capsys):
    bad = tmp_path / "old_report.json"
    bad.write_text(json.dumps({"v": 0, "scenario_id": "x", "mode": "c1",
                               "verdict": "pass"}))
    assert main(["report", str(bad)]) == 2
    assert "schema version" in capsys.readouterr().err


def test_check_modulus_subcommand(tmp_path, capsys):
    code = main(["check-modulus", "--out", str(tmp_path)])
    assert code == 0
    assert "modulus_check: pass" in capsys.readouterr().out
    assert (tmp_path / "modulus_check_report.json").exists()


def test_validate_solver_subcommand(tmp_path, capsys):
    code = main(["validate-solver", "--operators", "2",
                 "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "solver_validation: pass" in out
    report = json.loads(
        (tmp_path / "solver_validation_report.json").read_text())
    assert report["limits"]["operators"] == 2
    assert report["flags"]["seed"] == 20260822


def test_calibrate_subcommand(tmp_path, capsys):
    code = main(["calibrate", "--out", str(tmp_path)])
    assert code == 0
    printed = json.loads(capsys.readouterr().out)
    stored = json.loads((tmp_path / "calibration.json").read_text())
    assert printed == stored
    assert 0.0 < stored["alpha"] <= 1.0 / 3.0


def test_run_scenario_api_reports_seed(tmp_path):
    doc = load_scenario("zero_case")
    report = run_scenario(doc, tmp_path)
    assert report["flags"]["seed"] == doc["seed"]
    assert report["config"]["id"] == "zero_case"


def test_numeric_scenario_reports_truncation(tmp_path):
    assert main(["run", "drift_c1_numeric", "--out", str(tmp_path)]) == 0
    report = json.loads(
        (tmp_path / "drift_c1_numeric_report.json").read_text())
    assert report["verdict"] == "inconclusive"
    assert report["flags"]["data_mode"] == "numeric"
    assert report["flags"]["scale_floor_k"] == 1
    assert report["limits"]["worst_margin"] is None


def test_bad_picard_block_exits_2(tmp_path, capsys):
    path = write_scenario(tmp_path, data_mode="numeric",
                          grid={"cells": 32}, picard={"damping": 2.0})
    assert main(["run", str(path)]) == 2
    assert "picard" in capsys.readouterr().err


@pytest.mark.parametrize("cells", [8, "many", None])
def test_numeric_mode_needs_sane_grid(tmp_path, cells, capsys):
    grid = {} if cells is None else {"cells": cells}
    path = write_scenario(tmp_path, data_mode="numeric", grid=grid)
    assert main(["run", str(path)]) == 2
    assert "grid.cells" in capsys.readouterr().err