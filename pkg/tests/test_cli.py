import csv
import io
import json

import numpy as np
import pytest

from tatkd.checkpoint import load_checkpoint
from tatkd.cli import parse_seed_range, run
from tatkd.data import read_idx
from tatkd.losses import read_correlation_csv, read_pgm

TINY = """\
# tiny run for tests
image_size = 8
n_train = 32
n_test = 16
num_classes = 3
batch_size = 16
epochs = 1
teacher_epochs = 1
patch_h = 4
patch_w = 4
groups = 4
eval_every = 0
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


@pytest.fixture
def trained(tmp_path, cfg_path):
    out = tmp_path / "run"
    assert run(["train-teacher", "--config", cfg_path, "--out", str(out)]) == 0
    assert run(["distill", "--config", cfg_path, "--out", str(out)]) == 0
    return out


def read_rows(text):
    return list(csv.DictReader(io.StringIO(text)))


# usage and validation ----------------------------------------------------------------


def test_unknown_subcommand(capsys):
    assert run(["teach"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_subcommand(capsys):
    assert run([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_bad_flag(capsys):
    assert run(["distill", "--frobnicate"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_constraint_violation_names_key(cfg_path, tmp_path, capsys):
    assert run(["distill", "--config", cfg_path, "--set", "groups=3", "--out", str(tmp_path)]) == 1
    assert "groups" in capsys.readouterr().err


def test_unknown_config_key(cfg_path, tmp_path, capsys):
    assert run(["train-teacher", "--config", cfg_path, "--set", "epsilonn=1", "--out", str(tmp_path)]) == 1
    assert "epsilonn" in capsys.readouterr().err


def test_seed_range_parsing():
    assert parse_seed_range("0..4") == [0, 1, 2, 3, 4]
    assert parse_seed_range("7") == [7]
    for bad in ("4..1", "a..b"):
        with pytest.raises(Exception):
            parse_seed_range(bad)


def test_bad_seed_range_exit_code(cfg_path, tmp_path):
    assert run(["sweep", "--config", cfg_path, "--axis", "epsilon", "--values", "0.1", "--seeds", "3..1",
                "--out", str(tmp_path)]) == 1


# runtime failures ---------------------------------------------------------------------


def test_missing_checkpoint_is_runtime_failure(cfg_path, tmp_path, capsys):
    assert run(["eval", "--config", cfg_path, "--checkpoint", str(tmp_path / "nope.ckpt")]) == 2
    assert "nope.ckpt" in capsys.readouterr().err


def test_corrupt_checkpoint_is_runtime_failure(cfg_path, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"TATCKPT1\x01")
    assert run(["eval", "--config", cfg_path, "--checkpoint", str(bad)]) == 2
    assert "Truncated" in capsys.readouterr().err


# commands -------------------------------------------------------------------------------


def test_gradcheck_passes(capsys):
    assert run(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "anchor-point" in out and "patch-group" in out


def test_gen_data_writes_idx(cfg_path, tmp_path):
    out = tmp_path / "data"
    assert run(["gen-data", "--config", cfg_path, "--out", str(out)]) == 0
    ds = read_idx(out / "train-images.idx", out / "train-labels.idx")
    assert ds.images.shape == (32, 8, 8, 1)
    assert (out / "config.cfg").exists()


def test_idx_data_drives_training(cfg_path, tmp_path):
    data = tmp_path / "data"
    assert run(["gen-data", "--config", cfg_path, "--out", str(data)]) == 0
    sets = [f"{k}={data / (k.split('_')[0] + '-' + k.split('_')[1] + '.idx')}"
            for k in ("train_images", "train_labels", "test_images", "test_labels")]
    args = ["train-teacher", "--config", cfg_path, "--set", "data=idx", "--out", str(tmp_path / "r")]
    for s in sets:
        args += ["--set", s]
    assert run(args) == 0


def test_train_and_distill_outputs(trained):
    for name in ("teacher.ckpt", "teacher_metrics.csv", "student.ckpt", "metrics.csv", "config.cfg"):
        assert (trained / name).exists()
    rows = read_rows((trained / "metrics.csv").read_text())
    assert list(rows[0]) == ["epoch", "loss_task", "loss_kl", "loss_tat", "loss_pg", "loss_ap", "metric", "seconds"]
    assert float(rows[-1]["loss_tat"]) > 0
    assert load_checkpoint(trained / "student.ckpt").meta["role"] == "student"


def test_distill_set_epsilon_reaches_checkpoint(cfg_path, tmp_path):
    out = tmp_path / "eps"
    assert run(["distill", "--config", cfg_path, "--set", "epsilon=0.1", "--out", str(out)]) == 0
    cfg_text = load_checkpoint(out / "student.ckpt").meta["config"]
    assert "epsilon = 0.1\n" in cfg_text
    # the teacher was trained on demand and reused
    assert (out / "teacher.ckpt").exists()


def test_eval_prints_metric(trained, cfg_path, capsys):
    assert run(["eval", "--config", cfg_path, "--checkpoint", str(trained / "student.ckpt")]) == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0.0 <= report["accuracy"] <= 1.0


def test_dump_tat_map(trained, cfg_path, tmp_path):
    out = tmp_path / "map"
    args = ["dump-tat-map", "--config", cfg_path, "--checkpoint", str(trained / "student.ckpt"),
            "--teacher", str(trained / "teacher.ckpt"), "--sample", "3", "--out", str(out)]
    assert run(args) == 0
    mat = read_correlation_csv(out / "tat_map.csv")
    assert mat.shape == (64, 64)
    np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-4)
    assert read_pgm(out / "tat_map.pgm").shape == (64, 64)


def test_dump_tat_map_needs_tat_student(cfg_path, tmp_path, capsys):
    out = tmp_path / "fm"
    assert run(["distill", "--config", cfg_path, "--set", "distill=fm", "--set", "phi_mode=conv",
                "--out", str(out)]) == 0
    args = ["dump-tat-map", "--config", cfg_path, "--checkpoint", str(out / "student.ckpt"),
            "--teacher", str(out / "teacher.ckpt"), "--out", str(out)]
    assert run(args) == 1


def test_cost(capsys):
    args = ["cost", "--set", "image_size=64", "--set", "patch_h=8", "--set", "patch_w=8", "--set", "groups=64",
            "--set", "pool_k=4", "--repeats", "2"]
    assert run(args) == 0
    out = capsys.readouterr().out
    ratio = float(out.split("ratio=")[1].split()[0])
    assert ratio >= 10


# sweep ------------------------------------------------------------------------------------


def test_sweep_epsilon_axis(cfg_path, tmp_path):
    out = tmp_path / "sw"
    values = ["0.05", "0.1", "0.15", "0.2", "0.25"]
    args = ["sweep", "--config", cfg_path, "--axis", "epsilon", "--values", *values, "--seeds", "0..1",
            "--out", str(out)]
    assert run(args) == 0
    rows = read_rows((out / "sweep.csv").read_text())
    assert len(rows) == 5 * 2 + 5
    assert [r["value"] for r in rows if r["seed"] == "mean"] == values
    # the teacher is shared: epsilon does not affect it
    assert (out / "teacher.ckpt").exists()


def test_sweep_pool_k_segmentation(cfg_path, tmp_path):
    out = tmp_path / "pool"
    args = ["sweep", "--config", cfg_path, "--set", "task=segmentation", "--axis", "pool_k", "--values", "1", "2", "4",
            "--seeds", "0..0", "--out", str(out)]
    assert run(args) == 0
    rows = read_rows((out / "sweep.csv").read_text())
    assert [r["value"] for r in rows if r["seed"] == "mean"] == ["1", "2", "4"]
    assert all(float(r["loss_ap"]) > 0 for r in rows)


def test_sweep_groups_extremes(cfg_path, tmp_path):
    out = tmp_path / "groups"
    args = ["sweep", "--config", cfg_path, "--set", "task=segmentation", "--axis", "groups", "--values", "1", "4",
            "--out", str(out)]
    assert run(args) == 0
    assert len(read_rows((out / "sweep.csv").read_text())) == 4


def test_sweep_invalid_value_propagates(cfg_path, tmp_path, capsys):
    args = ["sweep", "--config", cfg_path, "--axis", "groups", "--values", "1", "3", "--out", str(tmp_path)]
    assert run(args) == 1
    assert "groups" in capsys.readouterr().err


def test_sweep_multi_key_axis_arity(cfg_path, tmp_path):
    args = ["sweep", "--config", cfg_path, "--axis", "theta_mode,gamma_mode", "--values", "identity",
            "--out", str(tmp_path)]
    assert run(args) == 1


def test_sweep_teacher_dependent_axis_retrains(cfg_path, tmp_path):
    out = tmp_path / "nc"
    args = ["sweep", "--config", cfg_path, "--axis", "num_classes", "--values", "2", "3", "--out", str(out)]
    assert run(args) == 0
    assert (out / "2" / "teacher.ckpt").exists() and (out / "3" / "teacher.ckpt").exists()
