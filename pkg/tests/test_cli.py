from __future__ import annotations

import csv
import json

import pytest

from hints.cli import main
from hints.config import RunConfig, read_config_file, resolve
from hints.errors import ConfigConflict

FAST = ["--period", "12", "--lookback", "48", "--horizon", "12", "--ma-kernel", "5",
        "--stage1-epochs", "10", "--stage2-epochs", "1", "--bias-window", "12"]


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "synth.csv"
    assert main(["synth", "--out", str(path), "--n-vars", "3", "--length", "500", "--seed", "2"]) == 0
    return path


def test_flag_overrides_file(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("gamma = 0.3  # from file\n")
    cfg, sources = resolve(cfg_file, {"gamma": 0.9}, env={})
    assert cfg.gamma == 0.9 and sources["gamma"] == "command line"
    cfg, sources = resolve(cfg_file, {}, env={})
    assert cfg.gamma == 0.3 and sources["gamma"].startswith("file")


def test_conflicting_coefficients(tmp_path, capsys):
    with pytest.raises(ConfigConflict) as exc:
        resolve(None, {"beta": 0.7, "delta": 0.5}, env={})
    assert "beta from command line" in str(exc.value) and "delta from command line" in str(exc.value)
    assert main(["stage1", "--beta", "0.7", "--delta", "0.5"]) == 1
    err = capsys.readouterr().err
    assert "beta" in err and "delta" in err


def test_print_config_round_trips(tmp_path, capsys):
    assert main(["stage2", "--gamma", "0.25", "--lookback", "72", "--print-config"]) == 0
    text = capsys.readouterr().out
    (tmp_path / "c.cfg").write_text(text)
    back = RunConfig(**read_config_file(tmp_path / "c.cfg"))
    assert back.config_hash() == RunConfig(gamma=0.25, lookback=72).config_hash()


def test_env_out_dir(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("HINTS_OUT_DIR", str(tmp_path / "envdir"))
    assert main(["ingest", "--print-config"]) == 0
    assert f"out_dir = {tmp_path / 'envdir'}" in capsys.readouterr().out


def test_synth_then_stage1(tmp_path, data):
    out = tmp_path / "out"
    assert main(["stage1", "--data", str(data), "--out-dir", str(out)] + FAST) == 0
    with (out / "stage1_loss.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "loss"] and len(rows) == 12
    assert (out / "extractor.ckpt").exists() and (out / "influence.csv").exists()


def test_stage2_and_evaluate(tmp_path, data):
    out = tmp_path / "out"
    base = ["--data", str(data), "--out-dir", str(out)] + FAST
    assert main(["stage1"] + base) == 0
    assert main(["stage2"] + base) == 0
    assert main(["evaluate"] + base) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["mse"] >= 0 and "raw_mae" in metrics


def test_sweep_writes_five_rows(tmp_path, data):
    out = tmp_path / "out"
    assert main(["sweep", "--data", str(data), "--out-dir", str(out), "--gamma", "0.1,0.3,0.5,0.9,1.0"] + FAST) == 0
    (csv_path,) = out.glob("*_sweep_12.csv")
    with csv_path.open() as fh:
        assert len(list(csv.reader(fh))) == 6


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    assert "8/8 checks passed" in capsys.readouterr().out


def test_exit_codes(tmp_path):
    assert main(["stage1", "--gamma", "abc"]) == 1
    assert main(["nosuchcommand"]) == 1
    assert main(["ingest", "--data", str(tmp_path / "missing.csv")]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,x\n")
    assert main(["ingest", "--data", str(bad)]) == 2
