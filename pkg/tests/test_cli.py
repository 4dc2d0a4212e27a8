import csv
import json

import numpy as np
import pytest

from ccnn.cli import run
from ccnn.data import write_pts


def tiny_config(tmp_path, **train):
    cfg = {"train": {"epochs": 1, "batch_size": 4, **train},
           "data": {"train_count": 12, "test_count": 4}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_eval_perfect_predictions(tmp_path):
    rng = np.random.default_rng(0)
    for d in ("pred", "gt"):
        (tmp_path / d).mkdir()
    for i in range(3):
        pts = rng.uniform(0, 200, (68, 2))
        write_pts(tmp_path / "pred" / f"{i}.pts", pts)
        write_pts(tmp_path / "gt" / f"{i}.pts", pts)
    out = tmp_path / "out"
    assert run(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["mean_nle"] == 0 and rep["auc_alpha"] == 100 and rep["failure_rate"] == 0
    assert (out / "ced.csv").exists() and "57.88" in (out / "table.txt").read_text()


def test_ablate_two_rows(tmp_path):
    out = tmp_path / "out"
    assert run(["ablate", "--config", tiny_config(tmp_path), "--k", "1,2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["K"] for r in rows] == ["1", "2"]


def test_train_twice_identical_csv(tmp_path):
    cfg = tiny_config(tmp_path, epochs=2)
    for name in ("a", "b"):
        assert run(["train", "--config", cfg, "--seed", "3", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    for f in ("best.npz", "last.npz", "report.json", "manifest.txt", "config.json"):
        assert (tmp_path / "a" / f).exists()
    out = tmp_path / "ev"
    assert run(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "a" / "best.npz"), "--out", str(out)]) == 0
    assert (out / "report.json").exists()
    demo = tmp_path / "demo"
    assert run(["encode-demo", "--checkpoint", str(tmp_path / "a" / "best.npz"), "--out", str(demo)]) == 0
    assert (demo / "heatmaps.png").exists()


def test_synth_writes_dataset(tmp_path):
    out = tmp_path / "s"
    assert run(["synth", "--config", tiny_config(tmp_path), "--out", str(out)]) == 0
    assert len(list((out / "images").glob("*.pts"))) == 12
    assert (out / "synthetic_spec.json").exists()


def test_usage_errors(tmp_path, capsys):
    assert run(["frobnicate"]) == 1
    assert run(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1
    assert run(["eval", "--out", str(tmp_path / "o")]) == 1


def test_runtime_failure_writes_diagnostics(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"channel_scale": 3}}))
    out = tmp_path / "o"
    assert run(["train", "--config", str(bad), "--out", str(out)]) == 2
    assert "channel_scale" in (out / "diagnostics.txt").read_text()
