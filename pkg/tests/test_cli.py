import json
import os

import pytest

from seqmim import audit, cli

TINY_SYNTH = ["--users", "80", "--items", "40", "--attrs", "12", "--attrs-per-item", "3", "--clusters", "4",
              "--min-len", "6", "--max-len", "10", "--seed", "2"]
FAST = ["--set", "model.d=16", "--set", "model.blocks=1", "--set", "model.max_len=12",
        "--set", "train.pretrain_epochs=1", "--set", "train.pretrain_batch=40",
        "--set", "train.finetune_epochs=1", "--set", "eval.n_negatives=20"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root)] + TINY_SYNTH) == 0
    return str(root / "data")


def test_preprocess_roundtrip(tmp_path, data_dir, capsys):
    raw = os.path.join(os.path.dirname(data_dir), "raw")
    rc = cli.main(["preprocess", "--interactions", os.path.join(raw, "interactions.tsv"),
                   "--attributes", os.path.join(raw, "attributes.jsonl"), "--k", "1", "--out", str(tmp_path / "p")])
    assert rc == 0
    assert "users=80" in capsys.readouterr().out


def test_missing_input_is_usage_error(tmp_path):
    assert cli.main(["preprocess", "--interactions", str(tmp_path / "nope.tsv"), "--out", str(tmp_path)]) == 1
    assert cli.main(["pretrain", "--data", str(tmp_path / "nope")]) == 1
    assert cli.main(["bogus"]) == 1
    assert cli.main(["pretrain", "--set", "model.nope=1"]) == 1


def test_pipeline_commands(tmp_path, data_dir, capsys):
    pre = tmp_path / "pre"
    assert cli.main(["pretrain", "--data", data_dir, "--out", str(pre)] + FAST) == 0
    assert (pre / "config.txt").exists() and (pre / "checkpoint" / "manifest.json").exists()
    assert cli.main(["finetune", "--data", data_dir, "--out", str(tmp_path / "ft")] + FAST) == 1  # needs a mode
    assert cli.main(["finetune", "--data", data_dir, "--init", str(pre / "checkpoint"),
                     "--out", str(tmp_path / "ft")] + FAST) == 0
    assert cli.main(["evaluate", "--data", data_dir, "--ckpt", str(tmp_path / "ft" / "checkpoint"),
                     "--out", str(tmp_path / "ev"), "--label", "tiny"] + FAST) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert metrics["label"] == "tiny" and "10" in metrics["metrics"]["ndcg"]
    capsys.readouterr()
    assert cli.main(["report", str(tmp_path / "ev"), "--out", str(tmp_path / "rep")]) == 0
    assert "tiny" in capsys.readouterr().out


def test_timestamped_run_dir(tmp_path, data_dir, monkeypatch):
    monkeypatch.setenv("SEQMIM_OUTPUT_ROOT", str(tmp_path))
    assert cli.main(["finetune", "--data", data_dir, "--from-scratch"] + FAST) == 0
    runs = [d for d in os.listdir(tmp_path) if d.startswith("finetune-")]
    assert len(runs) == 1
    assert "train.finetune_epochs = 1" in (tmp_path / runs[0] / "config.txt").read_text()


def test_ablate_emits_five_runs(tmp_path, data_dir):
    assert cli.main(["ablate", "--data", data_dir, "--out", str(tmp_path)] + FAST) == 0
    runs = sorted(d for d in os.listdir(tmp_path) if os.path.isdir(tmp_path / d))
    assert len(runs) == 5
    labels = [json.loads((tmp_path / d / "metrics.json").read_text())["label"] for d in runs]
    assert labels == ["full", "-AAP", "-MIP", "-MAP", "-SP"]


def test_sweep_fractions(tmp_path, data_dir):
    rc = cli.main(["sweep", "--data", data_dir, "--fractions", "0.2,0.4,0.6,0.8,1.0", "--out", str(tmp_path)] + FAST)
    assert rc == 0
    assert len([d for d in os.listdir(tmp_path) if os.path.isdir(tmp_path / d)]) == 5
    assert cli.main(["sweep", "--data", data_dir, "--out", str(tmp_path / "x")] + FAST) == 1


def test_audit_exit_codes(monkeypatch, capsys):
    monkeypatch.setattr(audit, "finite_difference_audit", lambda loss, seed=0: 0.0)
    assert cli.main(["audit", "--seeds", "0"]) == 0
    monkeypatch.setattr(audit, "finite_difference_audit", lambda loss, seed=0: 0.5 if loss == "map" else 0.0)
    assert cli.main(["audit", "--seeds", "0"]) == 2
    assert "FAIL" in capsys.readouterr().out
