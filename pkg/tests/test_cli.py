import os

import pytest

from dpadaln.cli import main
from dpadaln.config import RunConfig
from dpadaln.experiments import AXES, ROW_COLUMNS, _variants

TINY = ["--set", "train.steps=4", "--set", "dp.batch_B=4", "--set", "train.diffusion_steps=10",
        "--set", "train.probe_size=8", "--set", "train.val_size=8", "--set", "train.val_every=2",
        "--set", "data.length=600"]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    for mode in ("dp_vanilla", "dp_aware"):
        assert main(["-q", "train", "--out", str(root / mode), "--set", f"run.mode={mode}",
                     "--set", "dp.noise_sigma=0.05"] + TINY) == 0
    return root


def test_train_writes_artifacts(runs, capsys):
    files = sorted(os.listdir(runs / "dp_aware"))
    assert files == ["bounds.txt", "checkpoint.bin", "config.ini", "grad_log.csv", "report.txt"]
    assert "mode = dp_aware" in (runs / "dp_aware" / "report.txt").read_text()


def test_diagnose(runs, tmp_path, capsys):
    out = tmp_path / "diag"
    rc = main(["diagnose", "--vanilla", str(runs / "dp_vanilla" / "grad_log.csv"),
               "--aware", str(runs / "dp_aware" / "grad_log.csv"), "--clip-C", "1.0", "--out", str(out)])
    assert rc == 0
    assert "[tails]" in capsys.readouterr().out
    names = sorted(os.listdir(out))
    assert "diagnostics.txt" in names and len(names) == 7
    assert (out / "ecdf_aware_cond.csv").read_text().startswith("t,ecdf,ccdf\n")


def test_diagnose_same_log_twice_gives_unit_ratios(runs, tmp_path, capsys):
    log = str(runs / "dp_aware" / "grad_log.csv")
    assert main(["diagnose", "--vanilla", log, "--aware", log, "--clip-C", "1", "--out", str(tmp_path)]) == 0
    row = [l for l in capsys.readouterr().out.splitlines() if l.startswith("dp_aware,p99")][0]
    assert row.endswith(",1,1")


def test_diagnose_rejects_mismatched_threshold(runs, tmp_path, capsys):
    log = str(runs / "dp_aware" / "grad_log.csv")
    rc = main(["diagnose", "--vanilla", log, "--aware", log, "--clip-C", "2.0", "--out", str(tmp_path)])
    assert rc == 2
    assert "clipped at C = 1" in capsys.readouterr().err
    assert main(["diagnose", "--vanilla", str(tmp_path / "nope.csv"), "--aware", log, "--clip-C", "1",
                 "--out", str(tmp_path)]) == 2


def test_evaluate(runs, tmp_path, capsys):
    out = tmp_path / "eval.txt"
    rc = main(["evaluate", "--checkpoint", str(runs / "dp_aware" / "checkpoint.bin"), "--task", "forecasting",
               "--windows", "2", "--out", str(out)])
    assert rc == 0
    assert "point_rmse" in out.read_text()
    assert main(["evaluate", "--checkpoint", str(tmp_path / "missing.bin")]) == 2


def test_bounds(runs, capsys):
    rc = main(["bounds", "--references", str(runs / "dp_aware" / "bounds.txt")])
    assert rc == 0
    text = capsys.readouterr().out
    assert "S_aware" in text and "[convex_ratio]" in text and "within_bound = True" in text


def test_config_errors_exit_2(capsys):
    assert main(["bounds", "--set", "bounds.c_max=-1"]) == 2
    assert "bounds" in capsys.readouterr().err
    assert main(["train", "--out", "x", "--set", "nonsense"]) == 2


def test_ablate(tmp_path, capsys):
    out = tmp_path / "abl.csv"
    assert main(["-q", "ablate", "--axis", "tightness", "--eval-windows", "1", "--out", str(out)] + TINY) == 0
    lines = out.read_text().splitlines()
    assert lines[1] == "variant," + ",".join(ROW_COLUMNS)
    assert [l.split(",")[0] for l in lines[2:]] == ["Loose (1.00)", "Medium (0.90)", "Tight (0.75)", "Too tight (0.50)"]


@pytest.mark.parametrize("axis,count", [("components", 4), ("operator", 4), ("tightness", 4), ("clip_C", 6)])
def test_ablation_variants(axis, count):
    rows = _variants(RunConfig.desk(), axis)
    assert len(rows) == count and axis in AXES
    assert len({label for label, _ in rows}) == count
    if axis == "components":
        assert rows[-1][0] == "DP-aware (full)" and rows[0][1].effective_bounds() is None
    with pytest.raises(ValueError):
        _variants(RunConfig.desk(), "depth")
