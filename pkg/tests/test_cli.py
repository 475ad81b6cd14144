import json
import math
import subprocess
import sys

import pytest

from dlanac import checkpoint as ckpt
from dlanac import cli, data, model
from dlanac.losses import TrainingError

TINY = {"stage1_epochs": 1, "stage2_epochs": 2, "batch_size": 4,
        "ae": {"depth": 2, "base_width": 4, "feat_channels": 8}, "som": {"L": 9, "k": 40}}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.CONFIG_ENV, raising=False)
    (tmp_path / "cfg.json").write_text(json.dumps(TINY))
    return tmp_path


@pytest.fixture
def pipeline(workdir):
    """Synthetic data plus pretrain and train checkpoints made through the CLI."""
    cfg = str(workdir / "cfg.json")
    d, pre, out = workdir / "d", workdir / "pre.ck", workdir / "tr.ck"
    assert cli.main(["gen-data", "--out", str(d), "--preset", "tiny", "--seed", "4"]) == 0
    assert cli.main(["--config", cfg, "pretrain", "--data", str(d), "--out", str(pre)]) == 0
    assert cli.main(["--config", cfg, "train", "--data", str(d), "--pre", str(pre),
                     "--out", str(out)]) == 0
    return workdir, d, pre, out


def test_full_pipeline(pipeline, capsys):
    workdir, d, pre, out = pipeline
    meta = ckpt.load(out).meta
    assert meta["stage"] == "train" and meta["epoch"] == 2 and meta["config"]["ae"]["frame_size"] == 16
    assert (workdir / "tr.ck.log.csv").read_text().startswith("epoch,step,L_int,L_gd,L_cp,L_sp,total")
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", str(out), "--data", str(d),
                     "--report-dir", str(workdir / "rep")]) == 0
    text = capsys.readouterr().out
    auc = float(text.strip().splitlines()[-1].split()[1])
    assert 0 <= auc <= 1
    assert (workdir / "rep" / "summary.txt").exists()
    assert cli.main(["score", "--ckpt", str(out), "--video", str(d / "test" / "video_0002")]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0] == "frame_index,psnr,score" and len(rows) == 1 + 40 - data.WINDOW


def test_ablation_flag_and_resume(pipeline):
    workdir, d, pre, out = pipeline
    cfg = str(workdir / "cfg.json")
    part = workdir / "part.ck"
    assert cli.main(["--config", cfg, "train", "--data", str(d), "--pre", str(pre),
                     "--out", str(part), "--max-epochs", "1"]) == 0
    assert ckpt.load(part).meta["epoch"] == 1
    assert cli.main(["--config", cfg, "train", "--data", str(d), "--pre", str(pre),
                     "--out", str(workdir / "res.ck"), "--resume", str(part)]) == 0
    assert (workdir / "res.ck").read_bytes() == out.read_bytes()
    assert cli.main(["--config", cfg, "train", "--data", str(d), "--pre", str(pre),
                     "--out", str(workdir / "abl.ck"), "--ablation", "fixed-m=3"]) == 0
    assert ckpt.load(workdir / "abl.ck").meta["dlan"]["M"] == 3


def test_env_var_supplies_config_path(workdir, monkeypatch):
    d = workdir / "d"
    cli.main(["gen-data", "--out", str(d), "--preset", "tiny"])
    (workdir / "env.json").write_text(json.dumps({**TINY, "seed": 9}))
    monkeypatch.setenv(cli.CONFIG_ENV, str(workdir / "env.json"))
    assert cli.main(["pretrain", "--data", str(d), "--out", str(workdir / "a.ck")]) == 0
    assert ckpt.load(workdir / "a.ck").meta["config"]["seed"] == 9
    # an explicit flag wins over the file, the file wins over the defaults
    assert cli.main(["pretrain", "--data", str(d), "--out", str(workdir / "b.ck"), "--seed", "2"]) == 0
    meta = ckpt.load(workdir / "b.ck").meta
    assert meta["config"]["seed"] == 2 and meta["config"]["som"]["L"] == 9


def test_synth_section_overrides_generator(workdir):
    (workdir / "s.json").write_text(json.dumps({"synth": {"n_test_videos": 1, "frames_per_video": 30}}))
    assert cli.main(["--config", str(workdir / "s.json"), "gen-data", "--out", str(workdir / "d"),
                     "--preset", "tiny"]) == 0
    m = data.load_manifest(workdir / "d")
    assert len(m.split("test")) == 1 and m.videos[0].frame_count == 30


@pytest.mark.parametrize("cfg", ['{"stage1_epochs": -1}', '{"lr": 1}', "[1, 2]", "{not json",
                                 '{"synth": {"fast_factor": 1.0}}', '{"ae": {"depth": "2"}}'])
def test_config_errors_exit_2(workdir, cfg, capsys):
    (workdir / "bad.json").write_text(cfg)
    argv = ["--config", str(workdir / "bad.json"), "gen-data", "--out", str(workdir / "d"),
            "--preset", "tiny"]
    if not cfg.startswith('{"synth"'):
        argv = ["--config", str(workdir / "bad.json"), "pretrain", "--data", str(workdir), "--out", "x"]
    assert cli.main(argv) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_file_exit_2(workdir):
    assert cli.main(["--config", str(workdir / "nope.json"), "gen-data", "--out", str(workdir)]) == 2


def test_data_errors_exit_3(workdir, capsys):
    assert cli.main(["pretrain", "--data", str(workdir), "--out", str(workdir / "x")]) == 3
    assert cli.main(["eval", "--ckpt", str(workdir / "none.ck"), "--data", str(workdir)]) == 3
    (workdir / "junk.ck").write_bytes(b"DLANCKPT" + b"\0" * 60)
    assert cli.main(["eval", "--ckpt", str(workdir / "junk.ck"), "--data", str(workdir)]) == 3
    assert "data error" in capsys.readouterr().err


def test_unknown_ablation_exit_2(pipeline):
    workdir, d, pre, _ = pipeline
    assert cli.main(["train", "--data", str(d), "--pre", str(pre), "--out", str(workdir / "z"),
                     "--ablation", "w/o-ac"]) == 2


def test_single_class_test_split_exit_3(pipeline):
    workdir, d, _, out = pipeline
    text = (d / "manifest").read_text().splitlines()
    # strip every label run so the test split is all normal
    cleaned = [" ".join(l.split()[:4]) if l.startswith("video") else l for l in text]
    (d / "manifest").write_text("\n".join(cleaned) + "\n")
    assert cli.main(["eval", "--ckpt", str(out), "--data", str(d)]) == 3


def test_divergence_exit_4_keeps_last_good(pipeline, monkeypatch):
    workdir, d, pre, _ = pipeline
    real = model.loss_and_grad
    windows = 2 * (40 - data.WINDOW)
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] > math.ceil(windows / 4) + 1:
            raise TrainingError("loss term 'separation' is not finite (inf)")
        return real(*args)

    monkeypatch.setattr(model, "loss_and_grad", flaky)
    out = workdir / "div.ck"
    assert cli.main(["--config", str(workdir / "cfg.json"), "train", "--data", str(d),
                     "--pre", str(pre), "--out", str(out)]) == 4
    assert ckpt.load(f"{out}.last_good").meta["epoch"] == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dlanac", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "pretrain", "train", "eval", "score"):
        assert cmd in res.stdout
