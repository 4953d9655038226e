import csv
import json

import pytest

from frigate.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "seed": 1,
        "bootstrap": 200,
        "synthetic": {"num_nodes": 16, "num_days": 1, "trips_per_bucket": 60.0},
        "model": {"horizon": 4, "enc_hidden": 8, "dec_hidden": 8, "mlp_hidden": 8, "d_moments": 4,
                  "gnn": {"layers": 2, "d_tau": 4, "d_pos": 4, "d_delta": 2, "d_edge": 4}},
        "train": {"max_epochs": 2, "max_train_batches": 5},
    }
    (root / "cfg.json").write_text(json.dumps(cfg))
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_end_to_end(workdir, capsys):
    d, cfg = workdir, workdir / "cfg.json"
    assert run("generate", "--config", cfg, "--out", d / "data") == 0
    for name in ("nodes.csv", "edges.csv", "readings.csv", "edge_flow.csv"):
        assert (d / "data" / name).exists()
    assert run("embed", "--config", cfg, "--data", d / "data", "--out", d / "emb.csv") == 0
    assert (d / "emb.csv").read_text().startswith("node_id,L_1,L_2,L_3,L_4\n")
    assert run("train", "--config", cfg, "--data", d / "data", "--out", d / "run") == 0
    assert (d / "run" / "train_log.csv").read_text().startswith("epoch,train_mae,val_mae,seconds")
    ck = d / "run" / "checkpoint.pt"
    assert run("predict", "--config", cfg, "--checkpoint", ck, "--data", d / "data",
               "--out", d / "pred.csv", "--t", "100,150") == 0
    rows = list(csv.DictReader(open(d / "pred.csv")))
    assert set(rows[0]) == {"node_id", "t", "k", "y_hat"}
    assert {r["k"] for r in rows} == {"1", "2", "3", "4"}
    assert run("evaluate", "--config", cfg, "--checkpoint", ck, "--data", d / "data",
               "--out", d / "report") == 0
    rep = json.loads((d / "report.json").read_text())
    assert rep["metrics"]["rmse"]["point"] >= rep["metrics"]["mae"]["point"]
    assert (d / "report.csv").read_text().startswith("metric,point,lo,hi,group")
    assert run("perturb", "--config", cfg, "--data", d / "data", "--out", d / "pert", "--x", 10) == 0
    assert run("experiment", "granularity", "--config", cfg, "--checkpoint", ck,
               "--data", d / "data", "--out", d / "exp") == 0
    assert len(list((d / "exp").glob("granularity_*.json"))) == 2
    assert "MAE" in capsys.readouterr().out


def test_bucketize(tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text("node_id,timestamp,value\na,10,1\na,20,2\nb,400,3\n")
    assert run("bucketize", "--input", raw, "--out", tmp_path / "b.csv") == 0
    assert (tmp_path / "b.csv").read_text().splitlines() == ["node_id,timestamp,value", "a,0,3.0", "b,1,3.0"]


def test_usage_errors_exit_2(tmp_path):
    assert run() == 2
    assert run("frobnicate") == 2
    assert run("generate") == 2
    assert run("generate", "--config", tmp_path / "missing.json", "--out", tmp_path) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"modle": {}}))
    assert run("generate", "--config", bad, "--out", tmp_path) == 2
    assert run("generate", "--seen-pct", "0", "--out", tmp_path, "--config", bad) == 2


def test_data_errors_exit_3(tmp_path, workdir):
    assert run("embed", "--data", tmp_path / "nowhere", "--out", tmp_path / "e.csv") == 3
    (tmp_path / "nodes.csv").write_text("node_id,lat,lon\na,30.0,104.0\nb,30.1,oops\n")
    (tmp_path / "edges.csv").write_text("src,dst\na,b\n")
    assert run("embed", "--data", tmp_path, "--out", tmp_path / "e.csv") == 3
    assert run("evaluate", "--checkpoint", tmp_path / "none.pt", "--data", tmp_path,
               "--out", tmp_path / "r") == 3


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    assert "evaluate" in capsys.readouterr().out
