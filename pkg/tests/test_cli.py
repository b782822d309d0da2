import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cqdc import cli, systems
from cqdc.impc import rollout


def small_pushing(tmp_path, outer=2, horizon=4):
    d = json.loads(systems.bundled_path("planar_pushing").read_text())
    d["impc"].update(max_outer=outer, horizon=horizon)
    p = tmp_path / "push.scenario"
    p.write_text(json.dumps(d))
    return str(p)


def run(argv):
    return cli.main([str(a) for a in argv])


def files(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


def test_step_writes_result_and_manifest(tmp_path, capsys):
    out = tmp_path / "o"
    assert run(["step", "bundled/cart_wall", "--u", "-1", "--out", out]) == 0
    doc = json.loads((out / "step.json").read_text())
    assert doc["result"]["q_next"] == [pytest.approx(0.0, abs=1e-9)]
    man = json.loads((out / "manifest.json").read_text())
    for key in ("command", "scenario_path", "resolved_config", "seed", "version", "start", "end",
                "outputs", "scenario"):
        assert key in man
    assert man["command"] == "step" and man["outputs"] == ["step.json"]
    assert json.loads(capsys.readouterr().out) == doc


@pytest.mark.parametrize("scheme", ["exact", "analytic", "randomized-first", "randomized-zeroth"])
def test_linearize_schemes(tmp_path, scheme):
    out = tmp_path / scheme
    assert run(["linearize", "bundled/planar_pushing", "--scheme", scheme, "--out", out]) == 0
    doc = json.loads((out / "linear_model.json").read_text())
    assert np.asarray(doc["B"]).shape == (5, 2)


def test_smooth_bench_csv(tmp_path):
    out = tmp_path / "b"
    assert run(["smooth-bench", "--n", "100", "1000", "--out", out]) == 0
    rows = list(csv.reader((out / "smooth_bench.csv").open()))
    assert len(rows) > 1 and all(len(r) == len(rows[0]) for r in rows)


def test_impc_outputs_and_roundtrip(tmp_path):
    scen = small_pushing(tmp_path)
    out = tmp_path / "i"
    assert run(["impc", scen, "--out", out]) == 0
    with (out / "cost_history.csv").open() as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["outer_iteration", "cost"] and len(rows) == 4
    traj = json.loads((out / "trajectory.json").read_text())
    sc = systems.read_scenario(scen)
    X = rollout(sc.model, np.asarray(traj["states"])[0], np.asarray(traj["inputs"]), traj["h"])
    np.testing.assert_allclose(X, traj["states"], atol=1e-12, rtol=0)
    assert float(rows[-1][1]) == pytest.approx(traj["cost_history"][-1], rel=0, abs=0)


def test_same_seed_reruns_are_byte_identical(tmp_path):
    scen = small_pushing(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["impc", scen, "--scheme", "randomized-zeroth", "--seed", 5, "--out", out]) == 0
    assert files(a) == files(b)
    # the manifest itself can drive the rerun
    c = tmp_path / "c"
    assert run(["impc", a / "manifest.json", "--scheme", "randomized-zeroth", "--seed", 5,
                "--out", c]) == 0
    assert files(c) == files(a)


def test_rrt_success_and_failure_codes(tmp_path):
    ok = tmp_path / "ok"
    assert run(["rrt", "bundled/planar_hand_fixed_y", "--iterations", 150, "--seed", 0, "--out", ok]) == 0
    with (ok / "diagnostics.csv").open() as f:
        header = next(csv.reader(f))
    assert header == ["iteration", "min_dist", "packing_ratio"]
    tree = json.loads((ok / "tree.json").read_text())
    assert tree["success"] and tree["path"][0] == 0
    fail = tmp_path / "fail"
    assert run(["rrt", "bundled/planar_hand_fixed_y", "--iterations", 3, "--out", fail]) == 1
    assert json.loads((fail / "manifest.json").read_text())["status"] == "goal not reached"


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run(["frobnicate"]) == 2
    assert run([]) == 2
    assert run(["step", tmp_path / "missing.scenario"]) == 2
    bad = tmp_path / "bad.scenario"
    bad.write_text('{"system": "cart_wall"')
    assert run(["step", bad, "--out", tmp_path / "x"]) == 2
    assert "scenario files are UTF-8 JSON" in capsys.readouterr().err
    assert run(["step", "bundled/cart_wall", "--u", "1 2", "--out", tmp_path / "y"]) == 2
    assert run(["ablate", "bundled/cart_wall", "--arms", "nonsense", "--out", tmp_path / "z"]) == 2


def test_invalid_scenario_exit_2(tmp_path):
    d = json.loads(systems.bundled_path("cart_wall").read_text())
    d["q_init"] = [-0.1]
    p = tmp_path / "pen.scenario"
    p.write_text(json.dumps(d))
    assert run(["step", p, "--out", tmp_path / "o"]) == 2


def test_ablation_independent_of_worker_count(tmp_path, monkeypatch):
    scen = small_pushing(tmp_path, outer=1, horizon=3)
    outs = []
    for n in ("1", "2"):
        monkeypatch.setenv("CQDC_THREADS", n)
        out = tmp_path / f"ab{n}"
        assert run(["ablate", scen, "--kind", "impc", "--seeds", 0, 1,
                    "--arms", "analytic", "randomized-zeroth", "--out", out]) == 0
        outs.append(files(out))
    assert outs[0] == outs[1]
    with (tmp_path / "ab1" / "ablation.csv").open() as f:
        assert next(csv.reader(f)) == ["arm", "seed", "outer_iteration", "cost"]


def test_full_precision_serialization():
    x = 0.1 + 0.2
    assert json.loads(cli.dumps({"x": x}))["x"] == x
    assert float(cli.csv_text(["v"], [(x,)]).splitlines()[1]) == x
    assert json.loads(cli.dumps({"v": float("inf")}))["v"] == "inf"


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "cqdc.cli", "step", "bundled/cart_wall", "--out",
                        str(tmp_path / "s")], capture_output=True, text=True)
    assert r.returncode == 0
    r = subprocess.run([sys.executable, "-m", "cqdc.cli", "bogus"], capture_output=True, text=True)
    assert r.returncode == 2
