import csv
import json
import subprocess
import sys

import pytest

from dptrn.cli import RunConfig, main, read_config_file
from dptrn.core import ConfigError

TINY_CONFIG = """\
# small enough to train in a couple of seconds
T = 6
M = 4
C = 3
relation_hidden = 16,8
classifier_hidden = 16,8
epochs = 3
n_train = 120
n_valid = 30
n_test = 60
seeds = 0,1
variants = full,flatten_mlp
n_explain = 3
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY_CONFIG)
    return path


def _run(*argv):
    return main([str(a) for a in argv])


def test_profile_te(capsys):
    assert _run("profile", "--T", 100, "--M", 52, "--C", 21) == 0
    out = capsys.readouterr().out
    assert "249,782" in out and "17,393,464" in out
    assert "1 MAC = 1 FLOP" in out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dptrn", "profile", "--T", "4", "--M", "3", "--C", "3"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "params,total," in res.stdout


def test_full_workflow(tmp_path, cfg_file, capsys):
    data, out = tmp_path / "data", tmp_path / "out"
    assert _run("gen-data", "--config", cfg_file, "--data-dir", data) == 0
    for split in ("train", "valid", "test"):
        assert (data / f"{split}.csv").exists() and (data / f"{split}_evidence.csv").exists()
    assert _run("train", "--config", cfg_file, "--data-dir", data, "--out-dir", out) == 0
    assert (out / "model.ckpt").exists()
    with open(out / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and all(r["seconds"] == "0.000" for r in rows)
    assert _run("eval", "--config", cfg_file, "--data-dir", data, "--out-dir", out) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0.0 <= metrics["accuracy"] <= 1.0
    assert len(metrics["confusion"]) == 3
    assert _run("explain", "--config", cfg_file, "--data-dir", data, "--out-dir", out) == 0
    assert (out / "explain" / "relations.csv").exists()
    assert (out / "explain" / "2_rw.ppm").exists()
    contrast = json.loads((out / "explain" / "evidence_contrast.json").read_text())
    assert contrast["n_samples"] == 60
    assert _run("ablate", "--config", cfg_file, "--data-dir", data, "--out-dir", out / "abl") == 0
    with open(out / "abl" / "ablation_summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    assert [r["variant"] for r in summary] == ["full", "flatten_mlp"]
    assert set(summary[0]) == {"variant", "recall_best", "recall_mean", "accuracy_best",
                               "accuracy_mean", "f1_best", "f1_mean"}
    # the serialized config reproduces the run on its own
    saved = read_config_file(out / "config.txt")
    assert saved["T"] == 6 and saved["epochs"] == 3


def test_train_eval_twice_identical(tmp_path, cfg_file):
    data = tmp_path / "data"
    _run("gen-data", "--config", cfg_file, "--data-dir", data)
    files = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert _run("train", "--config", cfg_file, "--data-dir", data, "--out-dir", out, "--seed", 7) == 0
        assert _run("eval", "--config", cfg_file, "--data-dir", data, "--out-dir", out, "--seed", 7) == 0
        files.append([(out / f).read_bytes() for f in ("model.ckpt", "train_log.csv", "metrics.json")])
    assert files[0] == files[1]


def test_null_signal_gives_chance_accuracy(tmp_path):
    cfg = tmp_path / "null.cfg"
    cfg.write_text("T = 6\nM = 4\nC = 5\nrelation_hidden = 16,8\nclassifier_hidden = 16,8\n"
                   "epochs = 3\nn_train = 500\nn_valid = 100\nn_test = 2000\namplitude = 0\n")
    data, out = tmp_path / "data", tmp_path / "out"
    assert _run("gen-data", "--config", cfg, "--data-dir", data) == 0
    assert _run("train", "--config", cfg, "--data-dir", data, "--out-dir", out) == 0
    assert _run("eval", "--config", cfg, "--data-dir", data, "--out-dir", out) == 0
    acc = json.loads((out / "metrics.json").read_text())["accuracy"]
    assert abs(acc - 0.2) < 0.05


def test_flags_override_config_file(cfg_file):
    from dptrn.cli import build_parser, resolve_config

    cfg = resolve_config(build_parser().parse_args(["train", "--config", str(cfg_file), "--T", "9", "--lr", "0.01"]))
    assert (cfg.T, cfg.lr, cfg.M) == (9, 0.01, 4)


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("T = 5\nwidth = 3\n")
    assert _run("profile", "--config", bad) == 1
    assert "width" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        read_config_file(bad)


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        _run("train", "--no-such-flag")
    assert exc.value.code == 1


def test_bad_dimensions_are_usage_error():
    assert _run("profile", "--T", 1) == 1


def test_missing_data_is_data_error(tmp_path, capsys):
    assert _run("train", "--data-dir", tmp_path / "nowhere") == 2
    assert "nowhere" in capsys.readouterr().err


def test_malformed_csv_is_data_error(tmp_path, cfg_file, capsys):
    data = tmp_path / "data"
    _run("gen-data", "--config", cfg_file, "--data-dir", data)
    with open(data / "train.csv", "a") as fh:
        fh.write("1,2\n")
    assert _run("train", "--config", cfg_file, "--data-dir", data, "--out-dir", tmp_path / "o") == 2
    assert "train.csv" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path, cfg_file):
    data = tmp_path / "data"
    _run("gen-data", "--config", cfg_file, "--data-dir", data)
    code = _run("train", "--config", cfg_file, "--data-dir", data, "--out-dir", tmp_path / "o", "--lr", 1e300)
    assert code == 3


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        _run("train", "--help")
    text = capsys.readouterr().out
    assert "default 0.0006" in text and "default 32" in text


def test_dump_round_trip(tmp_path):
    cfg = RunConfig(T=11, variant="ablation_b", record_time=True)
    cfg.dump(tmp_path / "c.txt")
    back = RunConfig(**read_config_file(tmp_path / "c.txt"))
    assert back == cfg
