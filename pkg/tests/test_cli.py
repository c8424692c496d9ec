import json

import pytest

from fgcprune.checkpoint import load_checkpoint
from fgcprune.cli import main

TINY = """
k = 5
epochs = 2
batch_size = 16
[dataset]
n_per_class = 12
test_per_class = 6
image_size = 8
[network]
layers = [{channels = 8, kernel = 4, stride = 2, padding = 1},
          {channels = 8, kernel = 3, stride = 1, padding = 1}]
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


@pytest.mark.parametrize("cmd", ["train", "eval", "analyze", "export-dataset"])
def test_help_exits_zero(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    assert "--out" in capsys.readouterr().out


def test_unknown_flag_is_user_error(capsys):
    assert main(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_command_is_user_error():
    assert main([]) == 1


def test_missing_config_names_path(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "absent.toml")]) == 1
    assert "absent.toml" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path)]) == 1
    assert "checkpoint.fgc" in capsys.readouterr().err


def test_invalid_override_is_user_error(cfg, tmp_path):
    assert main(["train", "--config", str(cfg), "--omega", "7", "--out", str(tmp_path / "r")]) == 1


def test_train_eval_analyze_pipeline(cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--seed", "3", "--rho", "0.1", "--out", str(out)]) == 0
    assert load_checkpoint(out / "checkpoint.fgc").epoch == 2
    assert json.loads((out / "config.json").read_text())["seed"] == 3
    capsys.readouterr()

    assert main(["eval", "--out", str(out)]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown == json.loads((out / "eval.json").read_text())
    assert 0.0 <= shown["error"] <= 1.0

    assert main(["eval", "--out", str(out), "--force-open"]) == 0
    assert json.loads(capsys.readouterr().out)["pruning_ratio"] == 0.0

    assert main(["analyze", "--out", str(out), "--queries", "2"]) == 0
    assert (out / "nmi.json").exists() and (out / "gate_ranking_layer1.csv").exists()

    events = [json.loads(l)["event"] for l in (out / "log.ndjson").read_text().splitlines()]
    assert events == ["start", "epoch", "epoch", "end", "eval", "eval", "analyze"]


def test_train_twice_gives_identical_logs(cfg, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "log.ndjson").read_bytes() == (tmp_path / "b" / "log.ndjson").read_bytes()
    assert (tmp_path / "a" / "checkpoint.fgc").read_bytes() == (tmp_path / "b" / "checkpoint.fgc").read_bytes()


def test_cli_resume_matches_uninterrupted(cfg, tmp_path):
    assert main(["train", "--config", str(cfg), "--epochs", "2", "--out", str(tmp_path / "full")]) == 0
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--out", str(tmp_path / "part")]) == 0
    assert main(["train", "--config", str(cfg), "--epochs", "2", "--out", str(tmp_path / "part"),
                 "--resume", str(tmp_path / "part" / "checkpoint.fgc")]) == 0
    assert ((tmp_path / "full" / "checkpoint.fgc").read_bytes()
            == (tmp_path / "part" / "checkpoint.fgc").read_bytes())


def test_export_then_train_from_idx(cfg, tmp_path):
    data = tmp_path / "data"
    assert main(["export-dataset", "--config", str(cfg), "--seed", "5", "--out", str(data)]) == 0
    names = sorted(p.name for p in data.iterdir() if p.name != "log.ndjson")
    assert names == ["t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte",
                     "train-images-idx3-ubyte", "train-labels-idx1-ubyte"]
    idx_cfg = tmp_path / "idx.toml"
    idx_cfg.write_text(TINY.replace("[dataset]", f"""[dataset]
kind = "idx"
train_images = "{data / 'train-images-idx3-ubyte'}"
train_labels = "{data / 'train-labels-idx1-ubyte'}"
test_images = "{data / 't10k-images-idx3-ubyte'}"
test_labels = "{data / 't10k-labels-idx1-ubyte'}\""""))
    assert main(["train", "--config", str(idx_cfg), "--epochs", "1", "--out", str(tmp_path / "r")]) == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(cfg, tmp_path, capsys):
    assert main(["train", "--config", str(cfg), "--lr", "1e300", "--out", str(tmp_path / "r")]) == 2
    assert "numeric failure" in capsys.readouterr().err
