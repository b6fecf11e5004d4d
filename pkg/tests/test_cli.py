import subprocess
import sys

import pytest

from shakg.cli import ConfigError, RunConfig, main, parse_config_text
from shakg.persistence import save_checkpoint, save_scripted_checkpoint
from shakg.trainer import TrainConfig

SMALL = "num_envs = 4\nsteps_per_update = 4\nmax_episode_steps = 20  # keep it short\ntotal_steps = 64\n"


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# tiny run\n" + SMALL)
    return p


def test_config_parsing():
    cfg = parse_config_text("seed = 3\n# comment\nlr=0.01  # inline\ntrace = yes\nvariant = no-low-level\n")
    assert cfg.seed == 3 and cfg.lr == 0.01 and cfg.trace is True and cfg.variant == "no-low-level"
    with pytest.raises(ConfigError):
        parse_config_text("colour = blue\n")
    with pytest.raises(ConfigError):
        parse_config_text("seed three\n")
    assert isinstance(RunConfig().train_config(), TrainConfig)


def test_train_writes_outputs(cfg_file, tmp_path):
    out = tmp_path / "s1"
    assert main(["train", "--config", str(cfg_file), "--seed", "1", "--steps", "64", "--out", str(out), "--trace"]) == 0
    assert (out / "metrics.csv").read_text().splitlines()[0] == "episode,step,raw_score,avg100"
    assert (out / "final.ckpt").exists() and (out / "trace.txt").exists()
    echoed = (out / "config.txt").read_text()
    assert "seed = 1" in echoed and "total_steps = 64" in echoed and "num_envs = 4" in echoed


def test_missing_config_exit_code(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert main(["train", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_bad_variant_is_config_error(cfg_file, tmp_path):
    assert main(["train", "--config", str(cfg_file), "--variant", "bogus", "--out", str(tmp_path / "x")]) == 1


def test_training_fault_exit_code(cfg_file, tmp_path, monkeypatch):
    from shakg import trainer

    def broken(*a, **k):
        raise trainer.TrainingFault("non-finite total loss")
        yield

    monkeypatch.setattr(trainer, "iter_training", broken)
    assert main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "f")]) == 2


def test_eval_scripted_checkpoint(tmp_path, capsys):
    from shakg.env import MiniQuest

    ckpt = tmp_path / "opt.ckpt"
    save_scripted_checkpoint(ckpt, MiniQuest().walkthrough())
    assert main(["eval", str(ckpt), "--episodes", "3"]) == 0
    assert capsys.readouterr().out == "20.0\n"


def test_eval_is_repeatable(make_model, tmp_path, capsys, cfg_file):
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, make_model(seed=12), TrainConfig())
    outs = []
    for _ in range(2):
        assert main(["eval", str(ckpt), "--config", str(cfg_file), "--episodes", "1", "--seed", "7"]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1] and float(outs[0]) >= 0


def test_eval_corrupt_checkpoint(tmp_path, capsys):
    ckpt = tmp_path / "bad.ckpt"
    ckpt.write_bytes(b"garbage")
    assert main(["eval", str(ckpt)]) == 1
    assert capsys.readouterr().out == ""


def test_trace_command(make_model, tmp_path, cfg_file):
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, make_model(seed=12), TrainConfig())
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    for path in (a, b):
        assert main(["trace", str(ckpt), "--config", str(cfg_file), "-o", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert text.count("===== Step") == text.count("Action: ") == 20
    c = tmp_path / "c.txt"
    assert main(["trace", str(ckpt), "--config", str(cfg_file), "-o", str(c), "--aggregation", "top25_sum"]) == 0
    att = [ln for ln in c.read_text().splitlines() if ln.startswith("att")]
    assert {ln.split(":")[0].strip() for ln in att} == {"attH_top25_sum", "attL_top25_sum"}


def test_combine_command(tmp_path, capsys):
    cfg_file = tmp_path / "short.cfg"
    cfg_file.write_text(SMALL + "max_episode_steps = 5\ntotal_steps = 320\n")
    for seed in (1, 2):
        assert main(["train", "--config", str(cfg_file), "--seed", str(seed), "--out", str(tmp_path / f"s{seed}")]) == 0
    a, b = (tmp_path / f"s{s}" / "metrics.csv" for s in (1, 2))
    assert a.read_text() != b.read_text()
    assert main(["combine", str(a), str(b), "--grid", "16"]) == 0
    assert capsys.readouterr().out.startswith("step,mean,std,runs\n")


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "shakg.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "train" in out.stdout
