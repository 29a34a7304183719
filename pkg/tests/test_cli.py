import csv
import json

import numpy as np
import pytest

from knotcast.cli import main
from knotcast import nn as knn

SMALL = ["--cells", "12", "--seed", "5", "--folds", "3", "--epochs", "3", "--mc-samples", "8"]


def run(tmp, name, *args):
    out = tmp / name
    rc = main([args[0], "--out", str(out), *SMALL, *args[1:]])
    return rc, out


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    rc, data = run(tmp, "data", "synth")
    assert rc == 0
    rc, model = run(tmp, "model", "train", "--data", str(data))
    assert rc == 0
    return tmp, data, model


def test_synth_writes_requested_cells(workdir):
    _, data, _ = workdir
    ids = {r["cell_id"] for r in rows(data / "capacity.csv")}
    assert len(ids) == 12
    assert len(json.loads((data / "truth.json").read_text())) == 12
    assert json.loads((data / "config.synth.json").read_text())["seed"] == 5


def test_train_log_and_header(workdir):
    _, _, model = workdir
    log = rows(model / "train_log.csv")
    assert [int(r["epoch"]) for r in log] == [1, 2, 3]
    head = knn.read_header(model / "model.bin")
    assert head["K"] == 3 and head["input_cycles"] == 1


def test_resume_checks_header(workdir, capsys):
    tmp, data, model = workdir
    rc, out = run(tmp, "resumed", "train", "--data", str(data), "--resume", str(model / "model.bin"), "--epochs", "2")
    assert rc == 0 and len(rows(out / "train_log.csv")) == 2
    rc, _ = run(tmp, "bad", "train", "--data", str(data), "--resume", str(model / "model.bin"), "--knots", "4")
    assert rc == 2
    assert "refusing to resume" in capsys.readouterr().err


def test_predict_outputs(workdir):
    tmp, data, model = workdir
    rc, out = run(tmp, "pred", "predict", "--data", str(data), "--model", str(model / "model.bin"))
    assert rc == 0
    knots = rows(out / "knots_pred.csv")
    assert len(knots) == 12 * 3
    for r in knots:
        assert float(r["ci95_lower"]) <= float(r["cycle_mean"]) <= float(r["ci95_upper"])
    traj = rows(out / "trajectory_pred.csv")
    by_cell = {}
    for r in traj:
        by_cell.setdefault(r["cell_id"], []).append(r)
    assert len(by_cell) == 12
    plot = json.loads((out / "plot_data.json").read_text())
    for cid, rs in by_cell.items():
        soh = np.array([float(r["soh"]) for r in rs])
        lo = np.array([float(r["soh_ci95_lower"]) for r in rs])
        hi = np.array([float(r["soh_ci95_upper"]) for r in rs])
        assert np.all(np.diff(soh) <= 1e-12)
        assert np.all(lo <= soh) and np.all(soh <= hi)
        eol = plot[cid]["knots"]["mean"][-1]
        at = np.interp(eol, [float(r["cycle"]) for r in rs], soh)
        assert at == pytest.approx(0.8, abs=2e-3)


def test_every_command_is_deterministic(workdir):
    tmp, data, model = workdir
    d = ["--data", str(data)]
    cases = {
        "synth": (["synth"], ["cycles.csv", "capacity.csv", "truth.json"]),
        "opt": (["optimize-knots", *d, "--budget", "12", "--knots", "2"], ["knots.json"]),
        "train": (["train", *d], ["model.bin", "train_log.csv"]),
        "predict": (["predict", *d, "--model", str(model / "model.bin")], ["knots_pred.csv", "trajectory_pred.csv", "plot_data.json"]),
        "eval": (["evaluate", *d], ["report.json", "report.txt"]),
        "robust": (["robustness", *d, "--draws", "3", "--sigma", "0,0.01"], ["robustness.json", "robustness_box.csv"]),
        "cycles": (["cycle-study", *d, "--cycle-counts", "1,3"], ["cycle_study.json", "cycle_study.txt"]),
    }
    for name, (args, files) in cases.items():
        outs = []
        for rep in range(2):
            rc, out = run(tmp, f"det_{name}_{rep}", *args)
            assert rc == 0, name
            outs.append(out)
        for fn in files:
            assert (outs[0] / fn).read_bytes() == (outs[1] / fn).read_bytes(), f"{name}/{fn}"


def test_optimize_history_matches_budget(workdir):
    tmp, data, _ = workdir
    rc, out = run(tmp, "opt", "optimize-knots", "--data", str(data), "--budget", "12", "--knots", "2")
    assert rc == 0
    res = json.loads((out / "knots.json").read_text())
    assert len(res["folds"]) == 3 and all(len(f["history"]) == 12 for f in res["folds"])


def test_failures_give_exit_code_and_manifest(tmp_path):
    rc, data = run(tmp_path, "data", "synth", "--recorded-cycles", "1")
    assert rc == 0
    rc, out = run(tmp_path, "eval", "evaluate", "--data", str(data), "--input-cycles", "2")
    assert rc == 3
    fails = json.loads((out / "failures.json").read_text())["failures"]
    assert {f["cell_id"] for f in fails} == {r["cell_id"] for r in rows(data / "capacity.csv")}


def test_bad_input_is_a_clean_error(tmp_path, capsys):
    rc = main(["evaluate", "--out", str(tmp_path / "x"), "--cycles", str(tmp_path / "missing.csv"), "--capacity", str(tmp_path / "c.csv")])
    assert rc == 2
    assert capsys.readouterr().err.startswith("knotcast: error:")
