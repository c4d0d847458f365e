import csv
import json

import pytest

from stabshift.cli import main

TINY_INI = """[experiment]
n_train = 200
n_holdout = 150
n_test = 100
runs = 1
deltas = 0.0, 1.0
n_perm = 19

[train]
epochs = 2
"""


@pytest.fixture
def ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return p


def test_simulate_then_ingest(tmp_path, ini):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(ini), "--n", "12", "--out", str(out), "--seed", "3"]) == 0
    assert (out / "trajectories.csv").exists() and (out / "manifest.csv").exists()
    assert main(["ingest", "--data", str(out / "trajectories.csv"), "--manifest", str(out / "manifest.csv"),
                 "--out", str(tmp_path / "ing")]) == 0
    summary = json.loads((tmp_path / "ing" / "ingest_summary.json").read_text())
    assert summary["trajectories"] == 12 and summary["features"] == ["f1", "f2", "f3"]


def test_ingest_protocol_half_mode(tmp_path, ini):
    out = tmp_path / "sim"
    for split, n, seed in (("train", 60, 1), ("holdout", 30, 2), ("test", 30, 3)):
        d = tmp_path / split
        assert main(["simulate", "--config", str(ini), "--n", str(n), "--split", split, "--out", str(d),
                     "--seed", str(seed)]) == 0
    # merge the three exports into one dataset with unique ids
    out.mkdir()
    with open(out / "d.csv", "w") as fd, open(out / "m.csv", "w") as fm:
        fd.write((tmp_path / "train" / "trajectories.csv").read_text().splitlines()[0] + "\n")
        fm.write("traj_id,split\n")
        for split in ("train", "holdout", "test"):
            for line in (tmp_path / split / "trajectories.csv").read_text().splitlines()[1:]:
                fd.write(f"{split}-{line}\n")
            for line in (tmp_path / split / "manifest.csv").read_text().splitlines()[1:]:
                fm.write(f"{split}-{line}\n")
    rc = main(["ingest", "--config", str(ini), "--data", str(out / "d.csv"), "--manifest", str(out / "m.csv"),
               "--protocol", "--mode", "half", "--batch-size", "32", "--repetitions", "5",
               "--out", str(tmp_path / "proto")])
    assert rc == 0
    summary = json.loads((tmp_path / "proto" / "ingest_summary.json").read_text())
    assert summary["protocol"]["repetitions"] == 5
    assert len((tmp_path / "proto" / "results.jsonl").read_text().splitlines()) == 5


def test_train_test_and_experiment(tmp_path, ini):
    out = tmp_path / "run"
    assert main(["train", "--config", str(ini), "--out", str(out), "--seed", "1"]) == 0
    with open(out / "training_log.csv") as fh:
        assert next(csv.reader(fh)) == ["epoch", "total", "recon", "reg"]
    assert main(["test", "--config", str(ini), "--model", str(out / "model.json"), "--regime", "boundary",
                 "--delta", "0.5", "--out", str(out)]) == 0
    res = json.loads((out / "test_result.json").read_text())
    assert set(res) == {"method", "statistic", "p_value", "threshold", "reject", "n_resamples", "seed"}
    exp = tmp_path / "exp"
    assert main(["experiment", "--config", str(ini), "--out", str(exp), "--quiet"]) == 0
    for name in ("curves.csv", "results.jsonl", "summary.csv", "config.ini"):
        assert (exp / name).exists()
    assert main(["report", "--results", str(exp / "results.jsonl"), "--dataset", "spring",
                 "--out", str(tmp_path / "rep")]) == 0
    for name in ("curves.csv", "summary.csv"):
        assert (tmp_path / "rep" / name).read_bytes() == (exp / name).read_bytes()


def test_output_dir_from_environment(tmp_path, ini, monkeypatch):
    monkeypatch.setenv("STABSHIFT_OUT", str(tmp_path / "envout"))
    assert main(["simulate", "--config", str(ini), "--n", "3"]) == 0
    assert (tmp_path / "envout" / "contexts.csv").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\nnot_a_key = 1\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["ingest", "--data", str(tmp_path / "nope.csv"), "--manifest", str(tmp_path / "nope.csv"),
                 "--out", str(tmp_path)]) == 2
    assert main(["test", "--method", "l2t", "--out", str(tmp_path)]) == 2
    (tmp_path / "d.csv").write_text("traj_id,step,t,f1,label\na,0,0,nan,1\na,1,1,1,1\n")
    (tmp_path / "m.csv").write_text("traj_id,split\na,train\n")
    assert main(["ingest", "--data", str(tmp_path / "d.csv"), "--manifest", str(tmp_path / "m.csv"),
                 "--out", str(tmp_path)]) == 2
    inf = tmp_path / "inf.ini"
    inf.write_text(TINY_INI.replace("epochs = 2", "epochs = 2\nlr = 1e300"))
    assert main(["train", "--config", str(inf), "--out", str(tmp_path / "inf")]) == 3
