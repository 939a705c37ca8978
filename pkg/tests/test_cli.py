import json
import subprocess
import sys

import numpy as np
import pytest

from sseg.cli import main
from sseg.data import read_label_png

CLASSES = "ball,leaf,box,sun,gift,tent"
TINY_CFG = """\
epochs = 1
batch_size = 4
seed = 3
model.n_queries = 4
model.embed_dim = 16
model.n_heads = 2
model.decoder_layers = 1
model.text_layers = 1
model.context_length = 10
model.backbone_channels = 8,16
model.proj_dim = 8
data.image_size = 32
pseudo.k = 4
"""


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "d"), "--n-images", "8", "--n-test", "4",
                 "--image-size", "32"]) == 0
    (root / "t.cfg").write_text(TINY_CFG)
    assert main(["train", "--config", str(root / "t.cfg"), "--seed", "7",
                 "--manifest", str(root / "d/train/manifest.jsonl"), "--out", str(root / "run")]) == 0
    return root


def test_synth_layout(workspace):
    d = workspace / "d"
    for split in ("train", "test"):
        lines = (d / split / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 4
        assert (d / split / "classes.txt").read_text().split()[0] == "background"
    assert (d / "synth.cfg").exists()


def test_train_flag_beats_config_and_snapshots(workspace):
    snap = (workspace / "run" / "config.cfg").read_text()
    assert "\nseed = 7\n" in snap and "model.embed_dim = 16" in snap
    assert (workspace / "run" / "final.sseg").exists()
    assert (workspace / "run" / "loss_curve.png").read_bytes()[:4] == b"\x89PNG"


def test_set_overrides_config_but_not_flags(tmp_path, workspace, capsys):
    code, out, _ = _run(capsys, "train", "--config", workspace / "t.cfg", "--set", "seed=9",
                        "--set", "epochs=1", "--manifest", workspace / "d/train/manifest.jsonl",
                        "--out", tmp_path / "a", "--max-steps", "1")
    assert code == 0
    assert "\nseed = 9\n" in (tmp_path / "a" / "config.cfg").read_text()
    code, _, _ = _run(capsys, "train", "--config", workspace / "t.cfg", "--set", "seed=9", "--seed", "4",
                      "--manifest", workspace / "d/train/manifest.jsonl", "--out", tmp_path / "b",
                      "--max-steps", "1")
    assert code == 0
    assert "\nseed = 4\n" in (tmp_path / "b" / "config.cfg").read_text()


def test_pseudomask_reports_oracle(tmp_path, workspace, capsys):
    code, out, _ = _run(capsys, "pseudomask", "--manifest", workspace / "d/train/manifest.jsonl",
                        "--out", tmp_path, "--k", "4")
    assert code == 0
    rows = dict(line.split("\t") for line in out.splitlines() if "\t" in line)
    assert rows["images"] == "4" and 0.0 <= float(rows["oracle_miou_mean"]) <= 1.0
    assert len(list((tmp_path / "colorpos-s2-w0.1" / "k4").glob("*.png"))) == 4


def test_infer_writes_outputs(tmp_path, workspace, capsys):
    image = sorted((workspace / "d/test/images").glob("*.png"))[0]
    code, out, _ = _run(capsys, "infer", "--image", image, "--classes", CLASSES,
                        "--checkpoint", workspace / "run/final.sseg", "--out", tmp_path, "--tau", "0.5")
    assert code == 0
    prefix = tmp_path / image.stem
    labels = read_label_png(f"{prefix}_labels.png")
    assert labels.shape == (32, 32) and labels.max() <= 6
    legend = (tmp_path / f"{image.stem}_legend.txt").read_text().splitlines()
    assert legend[-1].startswith("6\tbackground\t0,0,0")
    assert (tmp_path / "infer.cfg").exists()


def test_eval_happy_path(tmp_path, workspace, capsys):
    code, out, _ = _run(capsys, "eval", "--gt", workspace / "d/test/manifest.jsonl",
                        "--checkpoint", workspace / "run/final.sseg", "--pred", tmp_path / "pred",
                        "--out", tmp_path / "ev", "--protocol", "with_background", "--tau", "0.4")
    assert code == 0
    assert "protocol: with_background" in out and "tau: 0.4" in out and "mIoU" in out
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["protocol"] == "with_background" and report["tau"] == 0.4
    assert (tmp_path / "ev" / "iou_per_class.png").exists()
    # evaluating existing predictions needs no checkpoint
    code, out2, _ = _run(capsys, "eval", "--gt", workspace / "d/test/manifest.jsonl",
                         "--pred", tmp_path / "pred", "--protocol", "with_background", "--tau", "0.4")
    assert code == 0 and out2.split("[eval]")[0] == out.split("[eval]")[0]


def test_selftrain_end_to_end(tmp_path, workspace, capsys):
    code, out, _ = _run(capsys, "selftrain", "--checkpoint", workspace / "run/final.sseg",
                        "--images", workspace / "d/train/manifest.jsonl", "--classes", CLASSES,
                        "--out-dir", tmp_path, "--set", "student.epochs=1", "--set", "student.image_size=32",
                        "--eval-gt", workspace / "d/test/manifest.jsonl")
    assert code == 0
    summary = json.loads((tmp_path / "compare.json").read_text())
    assert summary["miou_delta"] == pytest.approx(summary["student_miou"] - summary["teacher_miou"])
    assert "student.epochs = 1" in (tmp_path / "selftrain.cfg").read_text()
    assert len((tmp_path / "labels" / "manifest.jsonl").read_text().splitlines()) == 4


@pytest.mark.parametrize("argv, code", [
    ([], 1),
    (["train", "--bogus"], 1),
    (["eval"], 1),
    (["train", "--set", "nokey=1", "--manifest", "m", "--out", "o"], 1),
    (["train", "--set", "batch_size=1", "--manifest", "m", "--out", "o"], 1),
    (["infer", "--image", "missing.png", "--classes", "a", "--checkpoint", "missing.sseg", "--out", "o"], 2),
])
def test_exit_codes(tmp_path, monkeypatch, capsys, argv, code):
    monkeypatch.chdir(tmp_path)
    got, _, err = _run(capsys, *argv)
    assert got == code
    assert "sseg: error:" in err
    if code == 1:
        assert "usage:" in err


def test_bad_config_file_is_usage_error(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("epochs = 1\nthis line is wrong\n")
    code, _, err = _run(capsys, "synth", "--config", tmp_path / "bad.cfg", "--out", tmp_path / "o")
    assert code == 1 and "line 2" in err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sseg.cli", "synth", "--help"], capture_output=True,
                          text=True, cwd=tmp_path)
    assert proc.returncode == 0 and "--n-images" in proc.stdout
