import json

import numpy as np
import pytest

from cafnet.checkpoint import Checkpoint, save_checkpoint
from cafnet.cli import main
from cafnet.config import ConfigError, parse_config_text, resolve
from cafnet.data.manifest import read_manifest, write_manifest
from cafnet.networks import HIGHPASS_KERNEL, architecture, build_network
from cafnet.report import read_kernel_csv


def test_config_parsing_and_precedence():
    values = parse_config_text("# comment\narch = ca5\nmax-iters=10\nlr = 0.5\nearly_stopping = no\n")
    assert values == {"arch": "ca5", "max_iterations": 10, "base_lr": 0.5, "early_stopping": False}
    cfg = resolve("train", values, {"arch": "caf"})
    assert cfg.arch == "caf" and cfg.max_iterations == 10
    assert resolve("train").base_lr == 0.01 and resolve("train").max_iterations == 500000
    assert parse_config_text('{"seed": 3, "batch": 16}') == {"seed": 3, "batch": 16}


@pytest.mark.parametrize("text, match", [
    ("arch = ca3\nfoo = 1\n", r"cfg:2: unknown key 'foo'"),
    ("arch ca3\n", r"cfg:1: expected key = value"),
    ("seed = x\n", r"cfg:1: invalid value"),
    ('{"seed": 1,\n "bogus": 2}', r"unknown key 'bogus'"),
    ('{"seed": 1,\n oops}', r"cfg:2: invalid JSON"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text, "cfg")


def test_invalid_values_rejected():
    with pytest.raises(ConfigError, match="architecture"):
        resolve("train", {"arch": "ca4"})
    with pytest.raises(ConfigError, match="batch"):
        resolve("train", {"batch": 1})
    with pytest.raises(ConfigError, match="command"):
        resolve("train", {"command": "eval"})


def test_cli_errors_go_to_stderr(tmp_path, capsys):
    assert main(["train", "--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "error" in err and "none.csv" in err
    (tmp_path / "bad.cfg").write_text("seed = 1\nwhat = 2\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg")]) == 2
    assert "bad.cfg:2" in capsys.readouterr().err
    assert main(["eval", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["train", "--arch", "ca4"])


def test_viz_filters_highpass(tmp_path):
    ckpt = Checkpoint.from_network(build_network(architecture("hp"), 2), ["a", "b"])
    save_checkpoint(ckpt, tmp_path / "hp.cafnet")
    assert main(["viz-filters", "--checkpoint", str(tmp_path / "hp.cafnet"), "--out", str(tmp_path / "f")]) == 0
    csvs = sorted((tmp_path / "f").glob("*.csv"))
    assert len(csvs) == 1 and len(list((tmp_path / "f").glob("*.pgm"))) == 1
    assert np.array_equal(read_kernel_csv(csvs[0]), HIGHPASS_KERNEL)
    assert (tmp_path / "f" / "viz-filters.config.json").exists()


def test_synth_train_eval_report_pipeline(tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["synth", "--out", str(data), "--devices", "3", "--images", "6", "--seed", "2"]) == 0
    manifest = data / "manifest.csv"
    args = ["train", "--arch", "ca3", "--manifest", str(manifest), "--max-iters", "4", "--batch", "8",
            "--eval-interval", "2", "--seed", "1"]
    assert main(args + ["--out", str(run)]) == 0
    for name in ("model.cafnet", "metrics.csv", "eval.json", "eval.txt", "confusion.csv", "train.config.json"):
        assert (run / name).exists(), name
    assert main(args + ["--out", str(tmp_path / "again")]) == 0
    assert (run / "metrics.csv").read_bytes() == (tmp_path / "again" / "metrics.csv").read_bytes()

    snap = json.loads((run / "train.config.json").read_text())
    assert snap["arch"] == "ca3" and snap["max_iterations"] == 4 and snap["command"] == "train"
    assert main(["train", "--config", str(run / "train.config.json"), "--out", str(tmp_path / "replay")]) == 0
    assert (run / "metrics.csv").read_bytes() == (tmp_path / "replay" / "metrics.csv").read_bytes()

    assert main(["eval", "--checkpoint", str(run / "model.cafnet"), "--manifest", str(manifest),
                 "--out", str(tmp_path / "ev"), "--image-level"]) == 0
    assert json.loads((tmp_path / "ev" / "eval.json").read_text())["level"] == "image"
    assert main(["report", str(run / "eval.json"), str(tmp_path / "ev" / "eval.json"), "--out", str(tmp_path / "rep")]) == 0
    assert "AVE" in (tmp_path / "rep" / "table.txt").read_text()

    assert main(["split", "--manifest", str(manifest), "--seed", "9", "--out", str(tmp_path / "s" / "m.csv")]) == 0
    moved = read_manifest(tmp_path / "s" / "m.csv")
    assert moved.load("train")[0].shape[0] == len(moved.split("train"))

    two = data / "two.csv"
    write_manifest(read_manifest(manifest).subset(["device_0", "device_1"]), two)
    assert main(["finetune", "--checkpoint", str(run / "model.cafnet"), "--manifest", str(two),
                 "--out", str(tmp_path / "ft"), "--max-iters", "2", "--batch", "8", "--eval-interval", "1"]) == 0
    assert main(["finetune", "--checkpoint", str(run / "model.cafnet"), "--manifest", str(two),
                 "--out", str(tmp_path / "ft2"), "--arch", "caf"]) == 1
