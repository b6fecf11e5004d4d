import csv

import numpy as np
import pytest

from shakg.env import MiniQuest
from shakg.persistence import (
    CheckpointError,
    MetricsWriter,
    combine_metrics,
    load_checkpoint,
    model_from_checkpoint,
    read_checkpoint,
    read_metrics,
    save_checkpoint,
    save_scripted_checkpoint,
)
from shakg.trace import trace_episode
from shakg.trainer import MetricRow, TrainConfig


def greedy_actions(model):
    return [r.action for r in trace_episode(model, MiniQuest(), TrainConfig(max_episode_steps=8))]


def test_round_trip_reproduces_greedy_episode(make_model, tmp_path):
    model = make_model(seed=12)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, TrainConfig(seed=12))
    header, arrays = read_checkpoint(path)
    assert header["format_version"] == 1 and header["seed"] == 12 and len(header["config_hash"]) == 64
    for name, value in model.params.state_dict().items():
        assert np.array_equal(arrays[name], value)
    other = make_model(seed=99)
    load_checkpoint(path, other)
    assert greedy_actions(other) == greedy_actions(model)
    rebuilt, _ = model_from_checkpoint(path)
    assert greedy_actions(rebuilt) == greedy_actions(model)


def test_architecture_mismatch(make_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, make_model(), TrainConfig())
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(path, make_model(variant="no-low-level"))


def test_corrupt_and_truncated_files(make_model, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        read_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, make_model(), TrainConfig())
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(good.read_bytes()[:-100])
    with pytest.raises(CheckpointError):
        read_checkpoint(cut)


def test_scripted_checkpoint(tmp_path):
    path = tmp_path / "s.ckpt"
    save_scripted_checkpoint(path, ["look"])
    model, header = model_from_checkpoint(path)
    assert model is None and header["actions"] == ["look"]


def _write(path, scores, steps):
    w = MetricsWriter(path)
    for i, (s, st) in enumerate(zip(scores, steps), 1):
        w.write(MetricRow(i, st, s, float(np.mean(scores[max(0, i - 100):i]))))
    w.close()


def test_metrics_avg_column_recomputes(tmp_path, rng):
    scores = list(rng.choice([0.0, 5.0, 15.0, 20.0], size=250))
    _write(tmp_path / "m.csv", scores, list(range(10, 2510, 10)))
    rows = read_metrics(tmp_path / "m.csv")
    raw = [r["raw_score"] for r in rows]
    for i, r in enumerate(rows):
        assert abs(r["avg100"] - np.mean(raw[max(0, i - 99):i + 1])) <= 1e-9


def test_combine_mean_and_std(tmp_path):
    _write(tmp_path / "a.csv", [0.0, 10.0], [500, 1500])
    _write(tmp_path / "b.csv", [20.0, 20.0], [400, 1200])
    rows = combine_metrics([tmp_path / "a.csv", tmp_path / "b.csv"], grid=1000)
    assert rows[0] == {"step": 1000, "mean": 10.0, "std": 10.0, "runs": 2}
    assert rows[1]["mean"] == pytest.approx((5.0 + 20.0) / 2)


def test_metrics_header_is_checked(tmp_path):
    p = tmp_path / "x.csv"
    with open(p, "w", newline="") as fh:
        csv.writer(fh).writerow(["a", "b"])
    with pytest.raises(ValueError):
        read_metrics(p)
