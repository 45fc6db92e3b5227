import json
import subprocess
import sys

import numpy as np
import pytest

from dlrenkf.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from dlrenkf.harness import PRESETS, RunRecord


@pytest.fixture
def linear_file(tmp_path):
    cfg = PRESETS["linear"]()
    cfg["time"]["horizon"] = 0.3
    path = tmp_path / "linear.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_writes_record(tmp_path, linear_file, capsys):
    out = tmp_path / "run"
    code = main(["run", "--config", str(linear_file), "--filter", "denkf", "--dlr", "--rank", "2",
                 "--particles", "10", "--seed", "4", "--out", str(out), "--quiet"])
    assert code == EXIT_OK
    rec = RunRecord.from_dir(out)
    assert (rec.variant, rec.label, rec.seed) == ("denkf", "dlr2", 4)
    assert rec.config["filter"]["particles"] == 10
    assert "relative error" in capsys.readouterr().out


def test_run_adaptive_and_repetitions(tmp_path, linear_file):
    out = tmp_path / "rep"
    code = main(["run", "--config", str(linear_file), "--adaptive", "1e-3", "--min-rank", "1",
                 "--repetitions", "2", "--out", str(out), "--quiet"])
    assert code == EXIT_OK
    assert (out / "rep00" / "metrics.json").exists() and (out / "rep01" / "metrics.json").exists()
    assert (out / "comparison.csv").exists()
    assert RunRecord.from_dir(out / "rep01").label.startswith("dlr-adaptive")


def test_simulate_truth(tmp_path, linear_file):
    out = tmp_path / "truth"
    assert main(["simulate-truth", "--config", str(linear_file), "--out", str(out), "--keep-every", "5"]) == EXIT_OK
    data = np.load(out / "truth.npz")
    assert data["dZ"].shape == (30, 4)
    assert data["states"].shape == (7, 4)


def test_sweep_compare_and_plot(tmp_path, linear_file, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep-rank", "--config", str(linear_file), "--ranks", "1", "3", "--out", str(out),
                 "--quiet"]) == EXIT_OK
    assert (out / "comparison.csv").read_text().count("\n") == 4
    capsys.readouterr()
    assert main(["compare", str(out), "--out", str(tmp_path / "t.csv")]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "fom" in printed and "dlr3" in printed
    run_dir = next(out.glob("*-dlr3-*"))
    assert main(["plot", str(run_dir), "--out", str(tmp_path / "img")]) == EXIT_OK
    assert (tmp_path / "img" / "params.png").exists()
    assert (tmp_path / "img" / "ranks.png").exists()


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"filter": {"particles": 1}}))
    assert main(["run", "--config", str(bad), "--quiet"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert main(["compare", str(tmp_path / "nothing")]) == EXIT_CONFIG


def test_config_and_preset_are_exclusive(linear_file):
    assert main(["run", "--config", str(linear_file), "--preset", "linear"]) == EXIT_CONFIG


def test_argument_errors_exit_with_two():
    with pytest.raises(SystemExit) as info:
        main(["run", "--filter", "kalman"])
    assert info.value.code == 2


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = PRESETS["linear"]()
    cfg["model"]["rate"] = -1e306
    path = tmp_path / "blow.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(path), "--quiet", "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "dlrenkf.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("simulate-truth", "run", "compare", "sweep-rank", "plot"):
        assert cmd in res.stdout
