import json

import pytest
import torch

from crrec.checkpoint import load_checkpoint
from crrec.cli import main
from crrec.config import git_blob_hash

FIXTURE = """userId,itemId,rating,timestamp
1,10,4.0,100
1,11,5.0,100
1,12,2.0,101
2,10,4.0,200
2,13,3.0,200
2,11,4.5,201
"""

SMALL = ["--set", "network.dim=16", "--set", "network.n_blocks=1", "--set", "network.n_heads=2",
         "--set", "critic.hidden=16"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    log = root / "log.csv"
    assert main(["synth", "--kind", "sessions", "--items", "20", "--actors", "60", "--length", "10",
                 "--seed", "3", "--out", str(log)]) == 0
    data = root / "data"
    assert main(["ingest", "--in", str(log), "--out", str(data), "--set", "data.window=6",
                 "--set", "data.train_frac=0.8", "--set", "data.valid_frac=0.1",
                 "--set", "data.test_frac=0.1"]) == 0
    pre = root / "pre"
    assert main(["pretrain", "--data", str(data), "--out", str(pre), "--seed", "1",
                 "--set", "pretrain.epochs=2", *SMALL]) == 0
    return root, data, pre


def test_ingest_fixture_counts_transitions(tmp_path):
    (tmp_path / "r.csv").write_text(FIXTURE)
    out = tmp_path / "ds"
    assert main(["ingest", "--in", str(tmp_path / "r.csv"), "--out", str(out), "--set", "data.window=3",
                 "--set", "data.train_frac=0.5", "--set", "data.valid_frac=0.25",
                 "--set", "data.test_frac=0.25"]) == 0
    from crrec.data import Dataset
    ds = Dataset.load(out)
    assert len(ds.train) + len(ds.valid) + len(ds.test) == 4
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["input_hashes"]["input"] == git_blob_hash(tmp_path / "r.csv")
    assert manifest["config"]["data"]["window"] == 3
    # defaulted fields are written out explicitly
    assert manifest["config"]["crr"]["gamma"] == 0.6 and manifest["seed"] == 0


def test_pretrain_outputs(pipeline):
    _, _, pre = pipeline
    for name in ("policy.ckpt", "embeddings.ckpt", "curve.csv", "manifest.json"):
        assert (pre / name).exists()
    assert len((pre / "curve.csv").read_text().splitlines()) == 3


def test_evaluate_twice_is_byte_identical(pipeline, tmp_path):
    _, data, pre = pipeline
    reports = []
    for i in range(2):
        out = tmp_path / f"r{i}.json"
        assert main(["evaluate", "--checkpoint", str(pre / "policy.ckpt"), "--data", str(data),
                     "--seed", "5", "--out", str(out), "--samples", str(tmp_path / f"s{i}.csv")]) == 0
        reports.append(out.read_bytes())
    assert reports[0] == reports[1]
    assert (tmp_path / "s0.csv").read_bytes() == (tmp_path / "s1.csv").read_bytes()
    rep = json.loads(reports[0])
    assert 0 <= rep["ndcg10"] <= rep["hr10"] <= rep["hr10_rand"] <= 1


def test_train_crr_zero_iterations_returns_init(pipeline, tmp_path):
    _, data, pre = pipeline
    out = tmp_path / "crr"
    assert main(["train-crr", "--data", str(data), "--init", str(pre / "policy.ckpt"), "--out", str(out),
                 "--set", "crr.iterations=0", *SMALL]) == 0
    a, _ = load_checkpoint(pre / "policy.ckpt")
    b, _ = load_checkpoint(out / "policy.ckpt")
    assert a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_train_crr_rerun_is_byte_identical(pipeline, tmp_path):
    _, data, pre = pipeline
    args = ["--threads", "1", "train-crr", "--data", str(data), "--init", str(pre / "policy.ckpt"),
            "--set", "crr.iterations=20", "--set", "crr.eval_every=10", "--set", "crr.batch_size=16", *SMALL]
    for name in ("a", "b"):
        assert main(args + ["--out", str(tmp_path / name)]) == 0
    for f in ("policy.ckpt", "critic.ckpt", "curve.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_no_init_runs(pipeline, tmp_path):
    _, data, _ = pipeline
    assert main(["train-crr", "--data", str(data), "--no-init", "--out", str(tmp_path / "o"),
                 "--set", "crr.iterations=4", "--set", "crr.eval_every=2", *SMALL]) == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["inputs"] == {"data": str(data)}


def test_exit_codes(pipeline, tmp_path, capsys):
    _, data, pre = pipeline
    assert main(["pretrain", "--data", str(data), "--out", str(tmp_path), "--set", "pretrain.lr=-1"]) == 2
    assert "pretrain.lr" in capsys.readouterr().err
    assert main(["pretrain", "--data", str(data), "--out", str(tmp_path), "--set", "pretrain.nope=1"]) == 2
    assert main(["pretrain", "--data", str(data), "--out", str(tmp_path), "--set", "bogus"]) == 2
    assert main(["pretrain", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 3
    assert main(["evaluate", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(data),
                 "--out", str(tmp_path / "r.json")]) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert main(["ingest", "--in", str(bad), "--out", str(tmp_path / "x")]) == 3
    # invalid config fails before anything is written
    assert main(["ingest", "--in", str(bad), "--out", str(tmp_path / "y"), "--set", "data.window=0"]) == 2
    assert not (tmp_path / "y").exists()


def test_output_root_env(pipeline, tmp_path, monkeypatch):
    _, data, pre = pipeline
    monkeypatch.setenv("CRREC_OUTPUT_ROOT", str(tmp_path))
    assert main(["evaluate", "--checkpoint", str(pre / "policy.ckpt"), "--data", str(data), "--pool", "all",
                 "--out", "rel/report.json"]) == 0
    assert (tmp_path / "rel" / "report.json").exists()


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[data]\nwindow = 4\n[crr]\ngamma = 0.5\n")
    (tmp_path / "r.csv").write_text(FIXTURE)
    out = tmp_path / "ds"
    assert main(["ingest", "--config", str(cfg), "--in", str(tmp_path / "r.csv"), "--out", str(out),
                 "--set", "crr.gamma=0.7"]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["data"]["window"] == 4 and m["config"]["crr"]["gamma"] == 0.7


def test_synth_tabular_and_verify(tmp_path, capsys):
    out = tmp_path / "mdp.json"
    assert main(["synth", "--kind", "tabular", "--out", str(out), "--seed", "2"]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["optimal_policy"]) == 5
    assert main(["verify", "--suite", "tabular"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert any(l.startswith("PASS") and "bellman_residual" in l for l in lines)
