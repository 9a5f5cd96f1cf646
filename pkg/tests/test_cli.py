from __future__ import annotations

import csv
import json

import pytest

from sarouting.cli import main
from sarouting.gnn import load_checkpoint
from sarouting.topology import Topology

TINY = ["--epochs", "1", "--nodes", "5", "--flows", "2"]


def run(capsys, *argv):
    status = main(list(argv))
    out, err = capsys.readouterr()
    return status, out, err


def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({"train_samples": 2, "batch_size": 2, "horizon": 10, "window": 5, "k": 2, "features": [2, 4, 3], "taps": 2}))
    return str(path)


def test_solve_writes_trajectory(tmp_path, capsys):
    out = tmp_path / "mom.csv"
    status, stdout, _ = run(capsys, "solve", "--solver", "mom", "--nodes", "10", "--flows", "5", "--iters", "100", "--seed", "7", "--out", str(out))
    assert status == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 100 and "wall_ms" not in rows[0]
    assert "utility" in stdout


def test_solve_is_reproducible(tmp_path, capsys):
    for name in ("a.csv", "b.csv"):
        run(capsys, "--seed", "3", "solve", "--solver", "dd", "--iters", "20", "--out", str(tmp_path / name))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_solve_oracle_json(tmp_path, capsys):
    status, stdout, _ = run(capsys, "solve", "--solver", "oracle", "--nodes", "6", "--flows", "2", "--out", str(tmp_path / "o.json"), "--json")
    assert status == 0
    assert json.loads(stdout)["utility"] == json.loads((tmp_path / "o.json").read_text())["utility"]


def test_plot_missing_file(capsys):
    status, _, err = run(capsys, "plot", "missing.csv")
    assert status != 0 and "missing.csv" in err


def test_plot_renders_svg(tmp_path, capsys):
    data = tmp_path / "d.csv"
    data.write_text("x,y,g\n0,1,a\n1,2,a\n0,3,b\n1,0,b\n")
    status, _, _ = run(capsys, "plot", str(data), "--group", "g")
    assert status == 0
    assert (tmp_path / "d.svg").read_text().lstrip().startswith("<svg")
    status, _, err = run(capsys, "plot", str(data), "--y", "nope")
    assert status == 1 and "nope" in err


def test_unknown_flag_prints_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["solve", "--frobnicate"])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_gen_writes_topology(tmp_path, capsys):
    out = tmp_path / "t.json"
    status, stdout, _ = run(capsys, "gen", "--nodes", "8", "--k", "3", "--seed", "2", "--out", str(out), "--json")
    assert status == 0 and json.loads(stdout)["nodes"] == 8
    assert Topology.load(out).n == 8


def test_train_execute_inspect(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    out = tmp_path / "model"
    status, stdout, _ = run(capsys, "train", "--config", cfg, *TINY, "--out", str(out), "--json")
    assert status == 0 and json.loads(stdout)["epochs"] == 1
    assert (out / "checkpoint.json").exists() and (out / "training.csv").exists()
    _, _, meta = load_checkpoint(out / "checkpoint.json")
    assert meta["train"]["nodes"] == 5

    status, stdout, _ = run(capsys, "execute", str(out / "checkpoint.json"), "--out", str(tmp_path / "ex"), "--json")
    result = json.loads(stdout)
    assert status == 0 and result["mean_queue"] >= 0
    with open(tmp_path / "ex" / "windows.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 2 * 5 * 2

    status, stdout, _ = run(capsys, "inspect", str(out / "checkpoint.json"), "--json")
    doc = json.loads(stdout)
    assert status == 0 and doc["features"] == [2, 4, 3] and doc["adam_step"] == 1


def test_train_bundled_config_resolves(capsys, tmp_path):
    from sarouting.cli import resolve_config
    from sarouting.state_augmented import TrainConfig

    assert TrainConfig.load(resolve_config("paper_default.json")) == TrainConfig()
    status, _, err = run(capsys, "train", "--config", "nowhere.json", "--out", str(tmp_path))
    assert status == 1 and "nowhere.json" in err


def test_execute_missing_checkpoint(capsys):
    status, _, err = run(capsys, "execute", "no-such-checkpoint.json")
    assert status == 1 and "no-such-checkpoint.json" in err


def test_experiment_command(tmp_path, capsys):
    from sarouting.harness import minimal_config

    cfg = minimal_config("sa-vs-admm", tmp_path / "unused").to_dict()
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    status, stdout, _ = run(capsys, "experiment", str(path), "--out", str(tmp_path / "res"), "--json")
    assert status == 0 and json.loads(stdout)["failed"] == 0
    assert (tmp_path / "res" / "metrics.csv").exists()


def test_experiment_failure_sets_exit_status(tmp_path, capsys):
    from sarouting.harness import minimal_config

    cfg = minimal_config("node-sweep", tmp_path / "unused").to_dict()
    cfg["node_sizes"] = [1]
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    status, _, err = run(capsys, "experiment", str(path), "--out", str(tmp_path / "res"))
    assert status == 1 and "failed" in err
    assert (tmp_path / "res" / "metrics.csv").exists()
