import json
import os
import shutil
import subprocess
import sys

import pytest

from gridfm.cli import main
from gridfm.store import open_dataset


def run(*argv):
    return main([str(a) for a in argv])


def test_usage_errors_exit_one(capsys):
    assert run() == 1
    assert run("generate", "--case", "case14") == 1
    assert run("bogus") == 1
    assert run("--help") == 0


def test_runtime_error_exits_two(tmp_path, capsys):
    assert run("validate", "--data", tmp_path / "missing") == 2
    assert "MissingManifestError" in capsys.readouterr().err


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen") / "ds"
    assert run("generate", "--case", "case14", "--n", 24, "--seed", 3, "--out", out, "--target-shard-bytes", 8000) == 0
    return out


def test_generate_and_validate(generated, capsys):
    ds = open_dataset(generated)
    assert len(ds) == 24 and ds.num_shards >= 2 and ds.metadata["case"] == "case14"
    assert run("validate", "--data", generated) == 0
    assert "0 invalid" in capsys.readouterr().out


def test_validate_detects_corruption(tmp_path, generated):
    d = tmp_path / "copy"
    shutil.copytree(generated, d)
    shard = sorted(d.glob("shard_*.bin"))[0]
    raw = bytearray(shard.read_bytes())
    raw[100] ^= 0xFF
    shard.write_bytes(bytes(raw))
    assert run("validate", "--data", d) == 2


def test_train_then_finetune(tmp_path, generated, capsys):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"model": {"mpnn_type": "sage", "hidden_dim": 8, "num_conv_layers": 2},
                               "train": {"epochs": 2, "batch_size": 8, "datasets": [str(generated)]}}))
    assert run("train", "--config", cfg, "--out", tmp_path / "run") == 0
    assert (tmp_path / "run" / "best.ckpt").exists() and (tmp_path / "run" / "epochs.csv").exists()
    feas = tmp_path / "feas"
    assert run("generate", "--case", "case14", "--n", 12, "--scale-loads", 6, "--out", feas) == 0
    assert run("finetune", "--checkpoint", tmp_path / "run" / "best.ckpt", "--data", feas, "--regime", "ft-h",
               "--task", "classification", "--swap-head", "graph", "--epochs", 2, "--test-fraction", 0.25,
               "--out", tmp_path / "ft") == 0
    out = capsys.readouterr().out
    assert "FT-H" in out and "accuracy" in out
    assert run("report", "--logs", tmp_path / "run" / "epochs.csv", "--out", tmp_path / "rep") == 0
    assert (tmp_path / "rep" / "curves.svg").exists()


def test_hpo_and_report(tmp_path, generated, capsys):
    cfg = tmp_path / "hpo.json"
    cfg.write_text(json.dumps({"space": {"mpnn_type": "sage", "hidden_dim": [32, 40], "num_conv_layers": [2, 2]},
                               "max_trials": 2, "max_concurrent": 2, "epochs": 1, "dataset": str(generated)}))
    res = tmp_path / "res.csv"
    assert run("hpo", "--config", cfg, "--results", res) == 0
    assert "2/2 valid" in capsys.readouterr().out
    assert run("report", "--results", res, "--out", tmp_path / "rep") == 0
    assert (tmp_path / "rep" / "summary.csv").exists()


def test_seed_env_overrides_flag(tmp_path):
    env = dict(os.environ, GRIDFM_SEED="7")
    outs = []
    for seed in (1, 2):
        d = tmp_path / f"s{seed}"
        subprocess.run([sys.executable, "-m", "gridfm.cli", "generate", "--case", "case14", "--n", "3", "--seed", str(seed), "--out", str(d)],
                       env=env, check=True, capture_output=True)
        outs.append(open_dataset(d))
    assert outs[0].metadata["seed"] == outs[1].metadata["seed"] == 7
    assert [g.bus_target.tobytes() for g in outs[0]] == [g.bus_target.tobytes() for g in outs[1]]


def test_ingest_case_file(tmp_path, capsys):
    assert run("ingest", "case14", "case30", "--solve", "--out", tmp_path / "ing") == 0
    ds = open_dataset(tmp_path / "ing")
    assert len(ds) == 2 and ds.read(0).bus_target is not None
