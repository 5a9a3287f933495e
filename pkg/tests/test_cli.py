import csv
import subprocess
import sys

import numpy as np
import pytest

from divpatch.cli import main
from divpatch.metrics import read_dump
from divpatch.vit import ModelConfig, init_params, save_checkpoint

MICRO_SET = [
    "image_size=8", "patch_size=4", "channels=1", "dim=16", "depth=2", "heads=2",
    "num_classes=3", "train_size=32", "eval_size=16", "batch_size=8", "total_epochs=1",
    "profile_examples=8",
]  # fmt: skip


def _flags(pairs):
    out = []
    for p in pairs:
        out += ["--set", p]
    return out


@pytest.fixture
def micro_checkpoint(tmp_path):
    cfg = ModelConfig(image_size=8, patch_size=4, channels=1, dim=16, depth=2, heads=2, num_classes=3)
    path = tmp_path / "m.dpck"
    save_checkpoint(init_params(cfg, 0), path)
    return path


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_train_then_eval_and_profile(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", *_flags(MICRO_SET + ["alpha_mixing=1"]), "--output-dir", str(out)]) == 0
    for name in ("config.txt", "metrics.csv", "epochs.csv", "last.dpck", "best.dpck"):
        assert (out / name).exists()
    capsys.readouterr()
    assert main(["eval", "--config", str(out / "config.txt"), "--checkpoint", str(out / "last.dpck")]) == 0
    top1 = float(capsys.readouterr().out.strip().split("=")[1])
    assert 0.0 <= top1 <= 1.0


def test_profile_dump_parses(tmp_path, micro_checkpoint):
    prof, dump = tmp_path / "p.csv", tmp_path / "a.pdmp"
    rc = main(["profile", *_flags(MICRO_SET), "--checkpoint", str(micro_checkpoint),
               "--out", str(prof), "--dump", str(dump), "--max-examples", "8"])  # fmt: skip
    assert rc == 0
    with open(prof) as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["layer"]) for r in rows] == [0, 1, 2]
    layers = read_dump(dump)
    assert len(layers) == 3 and all(x.shape == (5, 16) for x in layers)
    assert all(x.dtype == np.float32 for x in layers)


def test_mix_preview(tmp_path):
    out = tmp_path / "mix.csv"
    assert main(["mix-preview", *_flags(MICRO_SET + ["mix_mode=block"]), "--count", "6", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and all(r["mode"] == "block" for r in rows)


def test_ablate_subset(tmp_path):
    out = tmp_path / "abl.csv"
    assert main(["ablate", *_flags(MICRO_SET), "--components", "cos", "--out", str(out)]) == 0
    with open(out) as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_missing_files_and_bad_flags(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.dpck")]) != 0
    assert "not found" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) != 0
    assert main(["train", "--set", "no_such_key=1"]) != 0
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--no-such-flag"])
    assert exc.value.code != 0


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "divpatch.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr
