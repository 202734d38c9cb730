import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from capacc.cli import dumps, read_matrix, read_report, run
from capacc.core import AnomalySet, CollectiveAnomaly, PointAnomaly


def write_csv(path, X, header=None):
    header = header or [f"v{i + 1}" for i in range(X.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(X.tolist())
    return str(path)


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def scenario(tmp_path):
    cfg = {
        "n": 120, "p": 5, "seed": 17,
        "precision": {"kind": "banded", "rho": 0.6, "r": 1},
        "anomalies": [{"s": 40, "e": 60, "J": [2, 3], "theta": 6.0}],
        "points": [{"t": 100, "count_vars": 1, "size_sd": 8.0}],
    }
    path = tmp_path / "scen.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_dumps_format():
    text = dumps({"b": 0.1, "n": 3, "x": [1.0, float("inf")], "ok": True})
    assert text == '{"b": 0.10000000000000001, "n": 3, "x": [1, null], "ok": true}\n'
    assert json.loads(text)["b"] == 0.1


def test_detect_constant_rows(tmp_path, capsys):
    data = write_csv(tmp_path / "c.csv", np.tile([1.0, 2.0, 3.0], (30, 1)))
    assert run(["detect", "--input", data]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["collective"] == [] and rep["points"] == []
    assert list(rep)[:3] == ["n", "p", "penalties"]


def test_pipeline_is_deterministic(tmp_path, scenario):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        d.mkdir()
        assert run(["simulate", "--config", scenario, "--output", str(d / "x.csv"), "--truth", str(d / "t.json")]) == 0
        assert run(["detect", "--input", str(d / "x.csv"), "--precision-source", "estimate",
                    "--adjacency", "banded:1", "--output", str(d / "r.json")]) == 0
        assert run(["evaluate", "--truth", str(d / "t.json"), "--detected", str(d / "r.json"),
                    "--output", str(d / "e.json")]) == 0
        outs.append([(d / f).read_bytes() for f in ("x.csv", "t.json", "r.json", "e.json")])
    assert outs[0] == outs[1]
    ev = json.loads(outs[0][3])
    assert "ari" in ev and ev["ari"] > 0.5


def test_report_round_trip(tmp_path):
    res = AnomalySet(collective=(CollectiveAnomaly(3, 9, (1, 4), (0.1, -2.5), 12.25),),
                     points=(PointAnomaly(20, (2,), 7.0),), total_cost=19.25)
    path = tmp_path / "r.json"
    d = {"n": 30, "p": 4, "penalties": {}}
    d.update(res.to_dict())
    path.write_text(dumps(d))
    again, n, p = read_report(str(path))
    assert (again, n, p) == (res, 30, 4)


def test_matrix_formats_agree(tmp_path, capsys):
    Q = np.array([[2.0, -0.5, 0.0], [-0.5, 2.0, -0.5], [0.0, -0.5, 2.0]])
    dense = tmp_path / "q.csv"
    dense.write_text("a,b,c\n" + "\n".join(",".join(repr(float(v)) for v in row) for row in Q) + "\n")
    trip = tmp_path / "q_trip.csv"
    trip.write_text("i,j,value\n1,1,2\n2,2,2\n3,3,2\n1,2,-0.5\n2,3,-0.5\n")
    np.testing.assert_array_equal(read_matrix(str(dense)), read_matrix(str(trip)))
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 3))
    X[20:30] += 3
    data = write_csv(tmp_path / "x.csv", X)
    out = []
    for q in (dense, trip):
        assert run(["detect", "--input", data, "--precision-source", "file", "--precision", str(q)]) == 0
        out.append(capsys.readouterr().out)
    assert out[0] == out[1]


def test_seed_env_fallback(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CAPACC_SEED", "5")
    assert run(["simulate", "--n", "10", "--p", "2"]) == 0
    env = capsys.readouterr().out
    monkeypatch.delenv("CAPACC_SEED")
    assert run(["simulate", "--n", "10", "--p", "2", "--seed", "5"]) == 0
    assert capsys.readouterr().out == env
    assert run(["--seed", "5", "simulate", "--n", "10", "--p", "2"]) == 0
    assert capsys.readouterr().out == env
    assert run(["simulate", "--n", "10", "--p", "2", "--seed", "6"]) == 0
    assert capsys.readouterr().out != env


def test_usage_errors(tmp_path, capsys):
    data = write_csv(tmp_path / "x.csv", np.zeros((10, 2)))
    assert run(["detect"]) == 1
    assert error_of(capsys)["exit_code"] == 1
    assert run(["detect", "--input", data, "--min-len", "1"]) == 1
    assert run(["detect", "--input", data, "--adjacency", "spiral:3", "--precision-source", "estimate"]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["evaluate", "--truth", data]) == 1
    capsys.readouterr()


def test_parse_errors(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n3,oops\n")
    assert run(["detect", "--input", str(bad)]) == 2
    err = error_of(capsys)
    assert err["error"] == "ParseError" and "oops" in err["message"]
    nan = tmp_path / "nan.csv"
    nan.write_text("a,b\n1,2\nnan,1\n")
    assert run(["detect", "--input", str(nan)]) == 2
    assert run(["detect", "--input", str(tmp_path / "missing.csv")]) == 2
    capsys.readouterr()


def test_numeric_error(tmp_path, capsys):
    data = write_csv(tmp_path / "x.csv", np.random.default_rng(1).normal(size=(20, 2)))
    q = tmp_path / "q.csv"
    q.write_text("1,2\n2,1\n")
    assert run(["detect", "--input", data, "--precision-source", "file", "--precision", str(q)]) == 3
    assert error_of(capsys)["error"] == "NumericalError"


def test_convergence_error(tmp_path, capsys):
    X = np.random.default_rng(2).normal(size=(50, 9))
    data = write_csv(tmp_path / "x.csv", X)
    assert run(["estimate", "--input", data, "--adjacency", "lattice:3", "--max-sweeps", "1"]) == 4
    err = error_of(capsys)
    assert err["error"] == "ConvergenceError" and err["gap"] > 0


def test_estimate_outputs(tmp_path, capsys):
    X = np.random.default_rng(3).normal(size=(200, 4))
    data = write_csv(tmp_path / "x.csv", X)
    out = tmp_path / "q.csv"
    rep = tmp_path / "meta.json"
    assert run(["estimate", "--input", data, "--adjacency", "banded:1", "--output", str(out),
                "--report", str(rep)]) == 0
    Q = read_matrix(str(out))
    assert Q.shape == (4, 4) and Q[0, 2] == 0
    assert json.loads(rep.read_text())["bandwidth"] == 1


def test_cpt_command(tmp_path, capsys):
    X = np.random.default_rng(4).normal(size=(100, 3))
    X[60:] += 2.0
    data = write_csv(tmp_path / "x.csv", X)
    assert run(["cpt", "--input", data]) == 0
    single = json.loads(capsys.readouterr().out)["changepoints"]
    assert len(single) == 1 and abs(single[0]["tau"] - 60) <= 2 and single[0]["detected"]
    assert run(["cpt", "--input", data, "--multiple"]) == 0
    multi = json.loads(capsys.readouterr().out)["changepoints"]
    assert any(abs(c["tau"] - 60) <= 2 for c in multi)


def test_tune_threads_identical(capsys):
    args = ["tune", "--n", "60", "--p", "4", "--reps", "150", "--seed", "3"]
    assert run(args) == 0
    one = capsys.readouterr().out
    assert run(args + ["--threads", "2"]) == 0
    assert capsys.readouterr().out == one
    res = json.loads(one)
    assert 0.03 <= res["alpha_hat"] <= 0.07 and res["within_band"]


def test_emit_curves(tmp_path, capsys):
    out = tmp_path / "curves.csv"
    assert run(["evaluate", "--emit-curves", str(out), "--n", "40", "--p", "4", "--precision-kind", "banded",
                "--rho", "0.7", "--thetas", "1", "3", "--reps", "100", "--seed", "2"]) == 0
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == ["method", "parameter", "theta", "power"]
    assert len(rows) == 4
    assert {r["method"] for r in rows} == {"true", "identity"}


def test_bench(capsys):
    assert run(["bench", "--sizes", "20", "40", "--repeat", "2"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert [r["p"] for r in res["rows"]] == [20, 40]
    assert np.isfinite(res["slope"])


def test_module_entry_point(tmp_path):
    data = write_csv(tmp_path / "x.csv", np.zeros((10, 2)))
    proc = subprocess.run([sys.executable, "-m", "capacc", "detect", "--input", data],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["collective"] == []
    proc = subprocess.run([sys.executable, "-m", "capacc", "detect"], capture_output=True, text=True, check=False)
    assert proc.returncode == 1
    assert json.loads(proc.stderr)["exit_code"] == 1
