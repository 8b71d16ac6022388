"""Command-line entry point."""

import subprocess
import sys

import pytest

from geomae.cli import main
from geomae.harness import Checkpoint
from geomae.harness.experiments import read_rows
from geomae.masking import load_masks

SMALL = ["--set", "model.d_model=8", "--set", "model.mlp_hidden=8", "--set", "data.n_in=4", "--set", "data.n_out=3",
         "--set", "train.epochs=1", "--set", "train.max_batches=2", "--set", "eval.rates=0.5, 0.9",
         "--set", "eval.seeds=1"]


def test_help_lists_subcommands(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for cmd in ("synth", "masks", "train", "eval", "ablate", "report", "stats"):
        assert cmd in out


def test_module_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "geomae", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "synth" in proc.stdout


@pytest.mark.parametrize("argv", [["synth", "--bogus"], ["frobnicate"], [], ["train"],
                                  ["synth", "--set", "nokey"], ["synth", "--set", "model.nope=1"]])
def test_usage_errors_exit_1(argv):
    assert main(argv) == 1


def test_runtime_failure_exits_2(tmp_path, capsys):
    assert main(["stats", "--data", str(tmp_path / "missing.csv"), "--out-dir", str(tmp_path)]) == 2
    assert "geomae stats" in capsys.readouterr().err


def test_synth_train_eval_report(tmp_path, capsys):
    d = str(tmp_path)
    assert main(["synth", "--nodes", "4", "--steps", "240", "--out-dir", d, *SMALL]) == 0
    assert main(["stats", "--data", d, "--out-dir", d]) == 0
    assert (tmp_path / "missing_rates.csv").read_text().startswith("station,missing_rate\n")
    assert main(["train", "--data", d, "--out-dir", d, *SMALL]) == 0
    ck = Checkpoint.load(tmp_path / "best.ckpt")
    assert ck.epoch == 1 and ck.model_config.d_model == 8
    assert (tmp_path / "history.json").exists()
    assert main(["eval", "--data", d, "--checkpoint", str(tmp_path / "best.ckpt"), "--out-dir", d]) == 0
    rows = read_rows(tmp_path / "results.csv")
    assert len(rows) == 2 * 2 * 1 * 3  # patterns x rates x seeds x metrics
    assert (tmp_path / "table.txt").exists()
    out = tmp_path / "rep"
    assert main(["report", str(tmp_path / "results.csv"), "--out-dir", str(out)]) == 0
    assert (out / "mae_point.png").exists()
    assert "±" in capsys.readouterr().out


def test_train_resume(tmp_path):
    d = str(tmp_path)
    assert main(["synth", "--nodes", "3", "--steps", "200", "--out-dir", d]) == 0
    assert main(["train", "--data", d, "--out-dir", d, *SMALL]) == 0
    more = [a if a != "train.epochs=1" else "train.epochs=2" for a in SMALL]
    (tmp_path / "last.ckpt").rename(tmp_path / "first.ckpt")
    assert main(["train", "--data", d, "--out-dir", d, "--resume", str(tmp_path / "first.ckpt"), *more]) == 0
    assert Checkpoint.load(tmp_path / "best.ckpt").epoch == 2


def test_masks_export(tmp_path):
    assert main(["masks", "--patterns", "point", "block", "--rates", "0.25", "0.9", "--count", "5",
                 "--shape", "3", "12", "2", "--out-dir", str(tmp_path)]) == 0
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["masks_block_25.gmk", "masks_block_90.gmk", "masks_point_25.gmk", "masks_point_90.gmk"]
    assert load_masks(tmp_path / "masks_block_90.gmk").shape == (5, 3, 12, 2)


def test_seed_option_changes_synthetic_data(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--nodes", "2", "--steps", "50", "--seed", "1", "--out-dir", str(a)]) == 0
    assert main(["synth", "--nodes", "2", "--steps", "50", "--seed", "2", "--out-dir", str(b)]) == 0
    assert (a / "data.csv").read_text() != (b / "data.csv").read_text()
