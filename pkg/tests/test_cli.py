import json
import subprocess
import sys

import numpy as np
import pytest

from procrisk.cli import PROPERTIES, main

from .conftest import fixture_path


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def tree_args(name="binomial1"):
    return ["--tree", fixture_path(f"{name}.json")]


# -- eval -------------------------------------------------------------------------


def test_eval_entropic_binomial(capsys):
    code, out, _ = run(capsys, "eval", *tree_args(), "--process", "X", "--risk", fixture_path("entropic.json"))
    assert code == 0
    report = json.loads(out)
    assert report["values"]["0"]["0"] == pytest.approx(np.log((1 + np.cosh(1)) / 2), abs=1e-12)
    assert report["values"]["1"] == {"1": -1.0, "2": 1.0}


def test_eval_zero_process(capsys):
    code, out, _ = run(capsys, "eval", *tree_args("binomial2"), "--process", "zero",
                       "--risk", fixture_path("avar.json"))
    assert code == 0
    values = json.loads(out)["values"]
    assert all(v == 0.0 for level in values.values() for v in level.values())


def test_eval_csv_is_long_format(capsys):
    code, out, _ = run(capsys, "eval", *tree_args(), "--process", "X", "--risk", fixture_path("entropic.json"),
                       "--format", "csv")
    lines = out.splitlines()
    assert code == 0 and lines[0] == "time,node,quantity,value"
    assert len(lines) == 4 and lines[1].startswith("0,0,rho,")


def test_eval_missing_process(capsys):
    code, _, err = run(capsys, "eval", *tree_args(), "--process", "Y", "--risk", fixture_path("entropic.json"))
    assert code == 2 and "processes.Y not found" in err


def test_eval_bad_risk_spec(capsys, tmp_path):
    spec = tmp_path / "risk.json"
    spec.write_text('{"kind": "entropic", "params": {}}')
    code, _, err = run(capsys, "eval", *tree_args(), "--process", "X", "--risk", str(spec))
    assert code == 2 and "params.r" in err


def test_eval_missing_file(capsys):
    code, _, err = run(capsys, "eval", "--tree", "/nonexistent.json", "--process", "X",
                       "--risk", fixture_path("entropic.json"))
    assert code == 2 and err.startswith("procrisk: error:")


def test_eval_failure_exit_code(capsys, tmp_path, monkeypatch):
    from procrisk import cli
    from procrisk.errors import OptimizerFailed

    def broken(*args, **kwargs):
        raise OptimizerFailed("no convergence")

    monkeypatch.setattr(cli, "_risk", broken)
    code, _, err = run(capsys, "eval", *tree_args(), "--process", "X", "--risk", fixture_path("entropic.json"))
    assert code == 3 and "no convergence" in err


# -- decompose ----------------------------------------------------------------------


def test_decompose_fixture_measure(capsys):
    code, out, _ = run(capsys, "decompose", *tree_args(), "--measure", fixture_path("measure_binomial1.json"))
    assert code == 0
    report = json.loads(out)
    assert report["residual"] < 1e-9
    assert report["D"]["1"] == pytest.approx(0.7)
    assert report["M"]["1"] == pytest.approx(6 / 7) and report["M"]["2"] == pytest.approx(8 / 7)


def test_decompose_unit_density(capsys, tmp_path):
    m = tmp_path / "m.json"
    m.write_text(json.dumps({"Z": {str(i): 1.0 for i in range(7)}}))
    code, out, _ = run(capsys, "decompose", *tree_args("binomial2"), "--measure", str(m))
    report = json.loads(out)
    assert code == 0
    assert all(v == pytest.approx(1.0) for v in report["M"].values())
    assert report["gamma"]["0"] == pytest.approx(1 / 3) and report["D"]["3"] == pytest.approx(1 / 3)


def test_decompose_negative_density(capsys, tmp_path):
    m = tmp_path / "m.json"
    m.write_text(json.dumps({"Z": {"0": 2.0, "1": -1.0, "2": 1.0}}))
    code, _, err = run(capsys, "decompose", *tree_args(), "--measure", str(m))
    assert code == 2 and "procrisk: error" in err


# -- check --------------------------------------------------------------------------------


def test_check_constant_entropic_passes(capsys):
    code, out, _ = run(capsys, "check", *tree_args("binomial3"), "--risk", fixture_path("entropic.json"),
                       "--property", "time-consistency", "--budget", "100")
    assert code == 0 and json.loads(out)["status"] == "pass"


def test_check_avar_writes_counterexample(capsys, tmp_path):
    out_file = tmp_path / "verdict.json"
    code, out, _ = run(capsys, "check", *tree_args("binomial2"), "--risk", fixture_path("avar.json"),
                       "--property", "time-consistency", "--out", str(out_file))
    assert code == 1 and out == ""
    report = json.loads(out_file.read_text())
    assert report["status"] == "fail" and report["counterexample"]["X"]


def test_check_unknown_property(capsys):
    code, _, err = run(capsys, "check", *tree_args(), "--risk", fixture_path("entropic.json"),
                       "--property", "liquidity")
    assert code == 2 and "unknown property" in err


CASES = {
    "acceptance": ("binomial3", "entropic_increasing", [], 0),
    "rejection": ("binomial3", "entropic_decreasing", [], 0),
    "weak": ("binomial3", "entropic_increasing", [], 0),
    "cash-subadditivity": ("binomial2", "avar", ["--budget", "1000"], 0),
    "cash-additivity": ("binomial2", "terminal_entropic_binomial2", [], 0),
    "calibration": ("binomial2", "entropic", ["--term", fixture_path("term_flat_binomial2.json")], 1),
    "maximal-inequality": ("binomial3", "entropic", ["--process", "X"], 0),
    "doob-riesz": ("binomial3", "entropic", ["--measure", fixture_path("measure_binomial3.json")], 0),
    "bubble-profile": ("binomial1", "entropic", ["--horizons", "1,2,3"], 0),
    "stability": ("binomial1", "avar", [], 0),
    "time-consistency": ("binomial2", "recursive_avar", ["--budget", "100"], 0),
}


@pytest.mark.parametrize("prop", PROPERTIES)
def test_every_property(capsys, prop):
    tree, risk, extra, expected = CASES[prop]
    code, out, _ = run(capsys, "check", *tree_args(tree), "--risk", fixture_path(f"{risk}.json"),
                       "--property", prop, *extra)
    report = json.loads(out)
    assert code == expected
    assert report["status"] == ("pass" if expected == 0 else "fail")


def test_check_needs_property_inputs(capsys):
    code, _, err = run(capsys, "check", *tree_args(), "--risk", fixture_path("entropic.json"),
                       "--property", "doob-riesz")
    assert code == 2 and "--measure" in err


def test_stability_needs_a_coherent_family(capsys):
    code, _, err = run(capsys, "check", *tree_args(), "--risk", fixture_path("entropic.json"),
                       "--property", "stability")
    assert code == 2


def test_table_stability(capsys):
    code, out, _ = run(capsys, "check", *tree_args(), "--risk", fixture_path("table_binomial1.json"),
                       "--property", "stability")
    assert code in (0, 1) and json.loads(out)["risk"] == {"kind": "penalty-table"}


# -- determinism ------------------------------------------------------------------------


@pytest.mark.parametrize("argv", [
    ["check", "--risk", "avar.json", "--property", "time-consistency"],
    ["check", "--risk", "entropic.json", "--property", "cash-subadditivity", "--budget", "200"],
    ["eval", "--risk", "decoupled_avar.json", "--process", "X"],
])
def test_reports_are_byte_identical(tmp_path, argv):
    args = [a if not a.endswith(".json") else fixture_path(a) for a in argv]
    texts = []
    for k in range(2):
        out = tmp_path / f"run{k}.json"
        main(args + ["--tree", fixture_path("binomial2.json"), "--seed", "7", "--out", str(out)])
        texts.append(out.read_bytes())
    assert texts[0] == texts[1]


def test_console_entry_points():
    argv = ["eval", "--tree", fixture_path("binomial1.json"), "--process", "X",
            "--risk", fixture_path("avar.json")]
    a = subprocess.run([sys.executable, "-m", "procrisk", *argv], capture_output=True, text=True)
    assert a.returncode == 0
    assert json.loads(a.stdout)["values"]["0"]["0"] == pytest.approx(0.5)
