import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from rmfsr import cli
from rmfsr.config import ConfigError, ExperimentConfig, apply_overrides
from rmfsr.dsp import read_wav, write_wav
from rmfsr.model import ModelConfig, receptive_field_frames

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = {
    "seed": 5,
    "stft": {"sample_rate": 1600},
    "model": {"channels": [2, 2, 3, 4, 4], "emb_dim": 8, "fourier_features": 4, "tcn_kernel": 3,
              "enc_dilations": [1, 2, 1, 2, 1], "tcn_dilations": [1, 2]},
    "train": {"epochs": 2, "steps_per_epoch": 3, "batch_size": 2, "clip_seconds": 0.2,
              "task": "sinusoid", "checkpoint_every": 2},
}


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


@pytest.fixture
def trained(tmp_path, tiny_cfg):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    return out


def test_config_round_trip_identity():
    cfg = ExperimentConfig.loads(yaml.safe_dump(TINY))
    again = ExperimentConfig.loads(cfg.dump())
    assert again == cfg
    assert again.dump() == cfg.dump()


@given(st.integers(1, 64), st.floats(0.01, 0.9), st.sampled_from(["dp", "dp-imf", "velocity"]))
def test_config_round_trip_property(bs, sig, mode):
    cfg = ExperimentConfig.from_dict({"train": {"batch_size": bs}, "flow": {"sigma_max": sig,
                                                                             "loss_mode": mode}})
    assert ExperimentConfig.loads(cfg.dump()) == cfg


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"trian": {}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"train": {"batchsize": 3}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"degradation": {"codec": {}}})
    with pytest.raises(ConfigError):
        ExperimentConfig.loads("train: [unclosed")


def test_overrides():
    d = apply_overrides({"train": {"lr": 1}}, ["train.lr=0.5", "model.channels=[1,2,3,4,5]", "seed=3"])
    assert d == {"train": {"lr": 0.5}, "model": {"channels": [1, 2, 3, 4, 5]}, "seed": 3}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_missing_config_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert cli.main(["bench", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_usage_errors_exit_2(capsys):
    assert cli.main([]) == 2
    assert cli.main(["train", "--out", "x"]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_bench_reports(tmp_path, capsys):
    assert cli.main(["bench", "--config", str(CONFIGS / "paper_scale.yaml"), "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["algorithmic_latency_ms"] == 20.0
    assert rep["receptive_field_frames"] == receptive_field_frames(ModelConfig.paper_scale())
    assert abs(rep["params"] - 7.8e6) / 7.8e6 < 0.2


def test_train_writes_outputs_and_resumes(tmp_path, tiny_cfg, trained):
    assert (trained / "final.ckpt").is_file() and (trained / "config.yaml").is_file()
    rows = list(csv.DictReader(open(trained / "metrics.csv")))
    assert len(rows) == 6
    partial = tmp_path / "partial"
    assert cli.main(["train", "--config", str(tiny_cfg), "--out", str(partial), "--steps", "4"]) == 0
    assert cli.main(["train", "--resume", str(partial), "--out", str(partial)]) == 0
    assert (partial / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()
    assert (partial / "final.ckpt").read_bytes() == (trained / "final.ckpt").read_bytes()


def test_seed_flag_changes_run(tmp_path, tiny_cfg, trained):
    other = tmp_path / "other"
    assert cli.main(["train", "--config", str(tiny_cfg), "--out", str(other), "--seed", "6"]) == 0
    assert (other / "metrics.csv").read_bytes() != (trained / "metrics.csv").read_bytes()


def test_restore_nfe_and_stream_verify(tmp_path, trained, capsys):
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 700)
    write_wav(tmp_path / "in.wav", x, 1600)
    for nfe in ("1", "8"):
        out = tmp_path / f"out{nfe}.wav"
        assert cli.main(["restore", "--ckpt", str(trained / "final.ckpt"), "--in",
                         str(tmp_path / "in.wav"), "--out", str(out), "--nfe", nfe]) == 0
        y, sr = read_wav(out)
        assert sr == 1600 and y.shape == x.shape and np.max(np.abs(y)) <= 1
    assert cli.main(["restore", "--ckpt", str(trained / "final.ckpt"), "--in",
                     str(tmp_path / "in.wav"), "--out", str(tmp_path / "s.wav"), "--stream",
                     "--verify"]) == 0
    dev = float(capsys.readouterr().out.split("deviation")[1].split()[0])
    assert dev < 1e-4


def test_restore_rate_mismatch(tmp_path, trained, capsys):
    write_wav(tmp_path / "in.wav", np.zeros(1600), 8000)
    code = cli.main(["restore", "--ckpt", str(trained / "final.ckpt"), "--in",
                     str(tmp_path / "in.wav"), "--out", str(tmp_path / "o.wav")])
    assert code != 0
    assert "resample" in capsys.readouterr().err


def test_corrupt_checkpoint(tmp_path, trained, capsys):
    bad = tmp_path / "bad.ckpt"
    data = bytearray((trained / "final.ckpt").read_bytes())
    data[:4] = b"XXXX"
    bad.write_bytes(bytes(data))
    write_wav(tmp_path / "in.wav", np.zeros(800), 1600)
    assert cli.main(["restore", "--ckpt", str(bad), "--in", str(tmp_path / "in.wav"),
                     "--out", str(tmp_path / "o.wav")]) == 1
    assert "BadMagicError" in capsys.readouterr().err


def test_degrade_emits_pairs(tmp_path, capsys):
    out = tmp_path / "data"
    assert cli.main(["degrade", "--config", str(CONFIGS / "degrade_full.yaml"), "--n", "10", "--out",
                     str(out), "--duration", "1.0"]) == 0
    rows = list(csv.DictReader(open(out / "manifest.csv")))
    assert len(rows) == 10
    assert len(list(out.glob("*_degraded.wav"))) == 10
    again = tmp_path / "again"
    cli.main(["degrade", "--config", str(CONFIGS / "degrade_full.yaml"), "--n", "10", "--out",
              str(again), "--duration", "1.0"])
    assert (out / "manifest.csv").read_bytes() == (again / "manifest.csv").read_bytes()
    assert (out / "00003_degraded.wav").read_bytes() == (again / "00003_degraded.wav").read_bytes()


def test_eval_rows_and_determinism(tmp_path, tiny_cfg, trained):
    cfg = yaml.safe_load(tiny_cfg.read_text())
    cfg["degradation"] = {"noise": {"snr_mean": 10.0, "snr_std": 0.0}}
    p = tmp_path / "deg.yaml"
    p.write_text(yaml.safe_dump(cfg))
    assert cli.main(["degrade", "--config", str(p), "--n", "2", "--out", str(tmp_path / "ts"),
                     "--duration", "1.0"]) == 0
    args = ["eval", "--ckpt", str(trained / "final.ckpt"), "--set", str(tmp_path / "ts"),
            "--nfe-list", "1,2,4", "--seed", "3"]
    assert cli.main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert [r["nfe"] for r in rows] == ["1", "2", "4"]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert cli.main(args[:5] + ["--nfe-list", "0"]) == 2
    assert cli.main(args[:3] + ["--set", str(tmp_path / "missing")]) == 1


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "rmfsr.cli", "bench", "--config",
                          str(CONFIGS / "smoke.yaml")], capture_output=True, text=True)
    assert res.returncode == 0 and "algorithmic latency     20 ms" in res.stdout
