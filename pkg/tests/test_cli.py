import subprocess
import sys

import pytest

from keysel.cli import main
from keysel.images import read_pnm

RUN_CFG = """\
input_height=16
input_width=16
channels=4,8
num_classes=3
global_dim=6
ks=2,2
dlfs_channels=8
stages=3:2
lr=0.003
batch_size=6
epochs=2
seed=0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    args = ["gen-data", "--out", str(root / "data"), "--classes", "3", "--seed", "1",
            "--train", "6", "--test", "2", "--size", "16", "--radius-min", "2", "--radius-max", "3"]
    assert main(args) == 0
    (root / "run.cfg").write_text(RUN_CFG)
    train = ["train", "--config", str(root / "run.cfg"), "--data", str(root / "data/manifest.txt")]
    assert main(train + ["--out", str(root / "full")]) == 0
    assert main(train + ["--out", str(root / "glob"), "--ablate", "local"]) == 0
    return root


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["train", "--config", "x"]) == 2
    assert main(["train", "--config", "x", "--data", "y", "--out", "z", "--ablate", "dropout"]) == 2
    assert main(["gradcheck", "--seeds", "-1"]) == 2
    (tmp_path / "bad.cfg").write_text("nonsense_key=1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--data", "y", "--out", str(tmp_path / "o")]) == 2
    capsys.readouterr()


def test_runtime_errors_exit_1(tmp_path, workspace, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", "x"]) == 1
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    args = ["eval", "--checkpoint", str(tmp_path / "junk.ckpt"), "--data", str(workspace / "data/manifest.txt")]
    assert main(args) == 1
    capsys.readouterr()


def test_gen_data_is_deterministic(workspace, tmp_path):
    args = ["gen-data", "--out", str(tmp_path / "again"), "--classes", "3", "--seed", "1",
            "--train", "6", "--test", "2", "--size", "16", "--radius-min", "2", "--radius-max", "3"]
    assert main(args) == 0
    assert (tmp_path / "again/manifest.txt").read_bytes() == (workspace / "data/manifest.txt").read_bytes()


def test_train_writes_outputs(workspace):
    out = workspace / "full"
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("epoch,lr,")
    assert (out / "best.ckpt").is_file() and (out / "last.ckpt").is_file()


def test_ablate_local_zeroes_selection_columns(workspace):
    rows = [line.split(",") for line in (workspace / "glob/metrics.csv").read_text().splitlines()[1:]]
    assert rows and all(float(r[4]) == 0 and float(r[5]) == 0 for r in rows)


def test_eval_reproduces_best_validation(workspace, capsys, tmp_path):
    capsys.readouterr()
    dump = tmp_path / "pred.csv"
    args = ["eval", "--checkpoint", str(workspace / "full/best.ckpt"), "--data",
            str(workspace / "data/manifest.txt"), "--split", "val", "--predictions", str(dump)]
    assert main(args) == 0
    text = capsys.readouterr().out
    mca = float(text.split("mean_class_accuracy=")[1].split()[0])
    rows = [r.split(",") for r in (workspace / "full/metrics.csv").read_text().splitlines()[1:]]
    assert mca == pytest.approx(max(float(r[7]) for r in rows), abs=1e-6)
    lines = dump.read_text().splitlines()
    assert lines[0] == "index,label,prediction" and len(lines) == 1 + 3
    rows = [tuple(int(v) for v in line.split(",")) for line in lines[1:]]
    recalls = []
    for c in sorted({y for _, y, _ in rows}):
        mine = [p for _, y, p in rows if y == c]
        recalls.append(sum(p == c for p in mine) / len(mine))
    assert mca == pytest.approx(sum(recalls) / len(recalls), abs=1e-6)


def test_gradcheck_zero_seeds(capsys):
    assert main(["gradcheck", "--seeds", "0"]) == 0
    assert capsys.readouterr().out == ""


def test_gradcheck_one_line_per_check(capsys):
    from keysel.gradcheck import CHECKS

    assert main(["gradcheck", "--seeds", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(CHECKS) and all(line.startswith("PASS ") for line in lines)


def test_viz_outputs(workspace, tmp_path, capsys):
    sample = sorted((workspace / "data/samples").glob("00000_*.dten"))
    d, rgb = str(sample[0]), str(sample[1])
    ckpt = str(workspace / "full/best.ckpt")
    assert main(["viz", "--checkpoint", ckpt, "--sample", rgb, d, "--out", str(tmp_path), "--mode", "corr"]) == 0
    corr = read_pnm(tmp_path / "00000_corr.pgm")
    assert corr.shape == (16, 16)  # 8x8 map upsampled by the backbone stride
    assert main(["viz", "--checkpoint", ckpt, "--sample", rgb, d, "--out", str(tmp_path), "--mode", "keypoints"]) == 0
    assert read_pnm(tmp_path / "00000_rgb_keypoints.ppm").shape == (16, 16, 3)
    assert read_pnm(tmp_path / "00000_d_keypoints.ppm").shape == (16, 16, 3)
    glob_ckpt = str(workspace / "glob/best.ckpt")
    args = ["viz", "--checkpoint", glob_ckpt, "--sample", rgb, d, "--out", str(tmp_path), "--mode", "keypoints"]
    assert main(args) == 2
    capsys.readouterr()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "keysel", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
