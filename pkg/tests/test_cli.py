import csv
import dataclasses
import json
import math

import numpy as np
import pytest

from storage_poa import cli
from storage_poa.cli import atomic_write, main, parse_list
from storage_poa.poa import lower_bound_value
from storage_poa.verification import CheckResult


def write_cfg(tmp_path, doc, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


EX2 = {"demand": {"kind": "example2"}, "price": {"kind": "linear", "a": 2}, "grid": {"n": 2000}}


def test_solve_example2_integrals(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert main(["solve", write_cfg(tmp_path, EX2), "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 2000
    dt = np.array([float(r["dt"]) for r in rows])
    assert float(np.sum(dt * [float(r["wel_cb"]) for r in rows])) == pytest.approx(0.5, abs=1e-3)
    assert float(np.sum(dt * [float(r["wel_dcb"]) for r in rows])) == pytest.approx(0.375, abs=1e-3)
    assert abs(float(np.sum(dt * [float(r["B_cb"]) for r in rows]))) < 1e-9
    text = capsys.readouterr().out
    assert text.startswith("cb: WEL=") and "dcb: WEL=" in text


def test_solve_zero_power_gives_zero_policy(tmp_path):
    out = tmp_path / "s.csv"
    cfg = write_cfg(tmp_path, {**EX2, "grid": {"n": 50}, "constraints": {"power": 0}})
    assert main(["solve", cfg, "--objective", "cb", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert "B_dcb" not in rows[0]
    assert max(abs(float(r["B_cb"])) for r in rows) < 1e-12


def test_solve_constant_demand_is_idle(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"demand": {"kind": "grid", "values": [0.4] * 4}, "price": {"kind": "linear", "a": 1}})
    assert main(["solve", cfg]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()[:5]))
    assert all(abs(float(r["B_cb"])) < 1e-12 and abs(float(r["B_dcb"])) < 1e-12 for r in rows)


def test_solve_step_monomial(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"demand": {"kind": "step", "x": 0.3, "eps": 0.4}, "price": {"kind": "monomial", "alpha": 3, "d": 2}})
    assert main(["solve", cfg]) == 0
    assert "dcb: WEL=" in capsys.readouterr().out


def test_poa_example2(tmp_path, capsys):
    out = tmp_path / "p.csv"
    assert main(["poa", write_cfg(tmp_path, EX2), "--out", str(out)]) == 0
    head, detail = capsys.readouterr().out.splitlines()
    assert head.startswith("Finite 1.33") and "±" in head
    assert "near_optimal=1" in detail
    row = read_csv(out)[0]
    assert row["case"] == "Finite" and float(row["value"]) == pytest.approx(4 / 3, abs=5e-3)


def test_poa_counterexample_and_unity(tmp_path, capsys):
    doc = {"demand": {"kind": "step", "d1": 1, "d2": 0, "t1": 0.5}, "price": {"kind": "counterexample", "delta": 0.001}}
    assert main(["poa", write_cfg(tmp_path, doc)]) == 0
    value = float(capsys.readouterr().out.split()[1])
    assert value >= (0.5 - math.log(2e-3)) / (1.5 - 2e-3) - 1e-6
    unity = {"demand": {"kind": "grid", "values": [0.4] * 4}, "price": {"kind": "linear", "a": 1}}
    assert main(["poa", write_cfg(tmp_path, unity, "u.json")]) == 0
    assert capsys.readouterr().out.startswith("Unity")


def test_exit_codes(tmp_path, capsys, monkeypatch):
    assert main([]) == 1
    assert main(["sweep", "--family", "cubic"]) == 1
    assert main(["poa", str(tmp_path / "nope.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"demand": {"kind": "example2"},\n "price": }')
    assert main(["poa", str(bad)]) == 1
    assert "line 2 col" in capsys.readouterr().err
    infeasible = {"demand": {"kind": "grid", "values": [0.4, 1.4]}, "price": {"kind": "linear", "a": 1}}
    assert main(["poa", write_cfg(tmp_path, infeasible)]) == 2
    tree_nonlinear = {"demand": {"kind": "tree", "depth": 2}, "price": {"kind": "monomial", "alpha": 2, "d": 2}}
    assert main(["poa", write_cfg(tmp_path, tree_nonlinear, "t.json")]) == 1

    real = cli.solve_cb_linear
    monkeypatch.setattr(cli, "solve_cb_linear", lambda *a, **k: dataclasses.replace(real(*a, **k), converged=False))
    assert main(["solve", write_cfg(tmp_path, {**EX2, "grid": {"n": 20}}, "e.json")]) == 3

    failing = [CheckResult(1, "stub", False, "forced")]
    monkeypatch.setattr(cli, "run_suite", lambda suite, report: [report(r.line()) or r for r in failing])
    assert main(["verify", "--suite", "linear"]) == 4
    assert "0/1 checks passed" in capsys.readouterr().out


def test_parse_list():
    assert parse_list("1,2,3", int) == [1, 2, 3]
    assert parse_list("1e-1..1e-4") == pytest.approx([0.1, 0.01, 1e-3, 1e-4])
    with pytest.raises(cli.UsageError):
        parse_list("0.3..1e-2")


def test_sweep_monomial(tmp_path, capsys):
    out = tmp_path / "m.csv"
    assert main(["sweep", "--family", "monomial", "--d", "1,2", "--nx", "6", "--neps", "5", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 60
    assert max(float(r["poa"]) for r in rows if r["d"] == "2") <= 27 / 19 + 1e-6
    summary = capsys.readouterr().out.splitlines()
    assert len(summary) == 2 and all(s.startswith("# sup=") for s in summary)


def test_sweep_lower_bound_family(tmp_path, capsys):
    out = tmp_path / "t.csv"
    assert main(["sweep", "--family", "theorem5", "--dmax", "3", "--out", str(out)]) == 0
    rows = read_csv(out)
    for r in rows:
        assert float(r["lower_bound_value"]) == pytest.approx(lower_bound_value(int(r["d"])))
        assert r["ok"] == "1"
    assert "all_ok=True" in capsys.readouterr().out


def test_sweep_counterexample(capsys):
    assert main(["sweep", "--family", "counterexample", "--deltas", "1e-1..1e-3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    rows = list(csv.DictReader(lines[:-1]))
    vals = [float(r["poa"]) for r in rows]
    assert len(vals) == 3 and vals[0] < vals[1] < vals[2]
    assert lines[-1] == "# deltas=3,increasing=True,all_ok=True"


def test_sample_demand(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["sample-demand", "--paths", "2", "--seed", "7", "--out", str(a)]) == 0
    assert main(["sample-demand", "--paths", "2", "--seed", "7", "--out", str(b)]) == 0
    assert a.read_text() == b.read_text()
    rows = read_csv(a)
    assert len(rows) == 200
    for r in rows:
        t = float(r["t"])
        assert float(r["mean"]) == pytest.approx(0.7 + 0.2 * math.sin(2 * math.pi * t))
        for k in ("path_1", "path_2"):
            assert float(r["lower"]) - 1e-12 <= float(r[k]) <= float(r["upper"]) + 1e-12
    assert "# paths=2" in capsys.readouterr().out
    assert main(["sample-demand", "--paths", "0"]) == 1


def test_verify_counterexample_suite(capsys):
    assert main(["verify", "--suite", "counterexample"]) == 0
    out = capsys.readouterr().out
    assert "[PASS]" in out and "1/1 checks passed" in out


def test_atomic_write(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("old")
    atomic_write(str(p), "new")
    assert p.read_text() == "new"
    assert [f.name for f in tmp_path.iterdir()] == ["x.txt"]
