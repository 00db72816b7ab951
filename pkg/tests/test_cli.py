import csv
import io
import json

import numpy as np
import pytest

from ifepanel.cli import main
from ifepanel.panel import Panel, panel_to_csv
from ifepanel.simulation import DgpSpec, dgp_generate


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(argv, out, err)
    return code, out.getvalue(), err.getvalue()


def ok(argv):
    code, out, err = run(argv)
    assert code == 0, err
    return json.loads(out)


def error(argv, expected):
    code, out, err = run(argv)
    assert code == expected, (code, err)
    if code != 2:
        doc = json.loads(err)
        assert doc["error"]["exit_code"] == expected and doc["schema"] == 1
    return err


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    paths = {}
    paths["probit"] = d / "probit.csv"
    paths["probit"].write_text(panel_to_csv(dgp_generate(DgpSpec("probit_static", 20, 20, seed=2), 0)[0]))
    paths["poisson"] = d / "poisson.csv"
    paths["poisson"].write_text(panel_to_csv(dgp_generate(DgpSpec("poisson_static", 15, 12, seed=1), 0)[0]))
    paths["gauss"] = d / "gauss.csv"
    paths["gauss"].write_text(panel_to_csv(dgp_generate(DgpSpec("linear_nonreg", 10, 10, seed=1), 0)[0]))
    paths["zeros"] = d / "zeros.csv"
    paths["zeros"].write_text(panel_to_csv(Panel(np.zeros((4, 4)), None)))
    paths["twos"] = d / "twos.csv"
    paths["twos"].write_text(panel_to_csv(Panel(np.full((4, 4), 2.0), np.ones((4, 4, 1)))))
    paths["dir"] = d
    return paths


def test_fit_analytic(files):
    doc = ok(["fit", "--model", "probit", "--data", str(files["probit"]), "--correct", "analytic", "--drop-constant"])
    assert doc["schema"] == 1 and doc["command"] == "fit"
    c = doc["correction"]
    assert len(c["beta_hat"]) == 1 and len(c["beta_corrected"]) == 1
    assert c["ci_lower"][0] < c["beta_corrected"][0] < c["ci_upper"][0]
    assert doc["fit"]["converged"]
    assert doc["config"]["correct"] == "analytic" and doc["config"]["trim"] == 1


def test_fit_without_correction_and_jackknife(files):
    doc = ok(["fit", "--model", "poisson", "--data", str(files["poisson"])])
    assert doc["config"]["correct"] == "none" and "correction" not in doc
    jk = ok(["fit", "--model", "poisson", "--data", str(files["poisson"]), "--correct", "jackknife",
             "--splits", "3", "--seed", "4"])
    assert len(jk["correction"]["beta_corrected"]) == 1 and jk["correction"]["n_partitions"] == 3


def test_output_is_reproducible(files, tmp_path):
    argv = ["fit", "--model", "poisson", "--data", str(files["poisson"]), "--correct", "analytic", "--exogenous"]
    out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
    assert run(argv + ["-o", str(out1)])[0] == 0 and run(argv + ["-o", str(out2)])[0] == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert json.loads(out1.read_text())["config"]["trim"] == 0


def test_ape(files):
    doc = ok(["ape", "--model", "poisson", "--data", str(files["poisson"]), "--effect", "deriv:k=1"])
    assert doc["config"]["correct"] == "analytic"
    a = doc["ape"]
    assert a["ci"][0] < a["delta_corrected"] < a["ci"][1]
    v = ok(["ape", "--model", "linear", "--data", str(files["gauss"]), "--effect", "variance"])["ape"]
    assert v["delta_corrected"] == pytest.approx(v["delta_hat"] * 1.2, rel=1e-10)
    n = ok(["ape", "--model", "poisson", "--data", str(files["poisson"]), "--effect", "deriv:k=1", "--correct", "none"])
    assert n["ape"]["method"] == "none"


def test_oracle_check(files):
    doc = ok(["oracle-check", "--data", str(files["gauss"])])
    assert doc["oracle"]["within_tolerance"] is True


def test_simulate_writes_tables(files):
    stem = files["dir"] / "t1.csv"
    doc = ok(["simulate", "--dgp", "linear-nonreg", "--N", "10", "--T", "10", "--reps", "100", "--seed", "1",
              "--out", str(stem)])
    rows = list(csv.reader(stem.open()))
    assert rows[0] == ["statistic", "N=10,T=10"] and len(rows) == 9
    cov = list(csv.reader((files["dir"] / "t1_coverage.csv").open()))
    assert len(cov) == 4
    assert doc["config"]["reps"] == 100


def test_simulate_config_file_matches_flags(files):
    cfg = files["dir"] / "sim.json"
    cfg.write_text(json.dumps({"N": 8, "T": 8, "reps": 100, "seed": 9, "estimators": ["fe", "analytic"]}))
    a = ok(["simulate", "--config", str(cfg)])
    b = ok(["simulate", "--N", "8", "--T", "8", "--reps", "100", "--seed", "9", "--estimators", "fe,analytic"])
    assert a["results"] == b["results"]
    c = ok(["simulate", "--config", str(cfg), "--seed", "10"])
    assert c["config"]["seed"] == 10


@pytest.mark.parametrize("argv", [
    ["fit", "--model", "probit", "--data", "{probit}", "--trim", "2"],
    ["fit", "--model", "probit", "--data", "{probit}", "--correct", "analytic", "--splits", "3"],
    ["fit", "--model", "probit", "--data", "{probit}", "--correct", "none", "--level", "0.9"],
    ["fit", "--model", "tobit", "--data", "{probit}"],
    ["simulate", "--grid", "standard", "--N", "10"],
    ["ape", "--model", "probit", "--data", "{probit}", "--effect", "elasticity"],
])
def test_conflicts(files, argv):
    error([a.format(**files) for a in argv], 3)


def test_exit_codes(files):
    error(["fit", "--bogus"], 2)
    error(["fit", "--model", "probit", "--data", str(files["dir"] / "missing.csv")], 4)
    error(["fit", "--model", "poisson", "--data", str(files["poisson"]), "-o", str(files["dir"] / "no" / "x.json")], 4)
    error(["fit", "--model", "probit", "--data", str(files["twos"])], 5)
    error(["fit", "--model", "linear", "--data", str(files["zeros"])], 6)
