import json
import os
from importlib import resources

import pytest

from dmdbench.cli import main

CONFIGS = resources.files("dmdbench") / "configs"
DIAMOND = str(CONFIGS / "diamond.json")
SYMMETRIC = str(CONFIGS / "diamond_symmetric.json")
BRAESS = str(CONFIGS / "braess.json")


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_run_twice_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", DIAMOND, "--seed", "7", "--out", str(a)]) == 0
    assert main(["run", "--config", DIAMOND, "--seed", "7", "--out", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == ["config.json", "manifest.json", "samples.csv", "schedule.csv", "solution.json", "trajectory.csv"]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    m = manifest(a)
    assert m["master_seed"] == 7 and len(m["trial_seeds"]) == 1
    assert set(m["files"]) == set(names) - {"manifest.json"}


def test_run_seed_changes_output(tmp_path):
    main(["run", "--config", DIAMOND, "--seed", "1", "--out", str(tmp_path / "a")])
    main(["run", "--config", DIAMOND, "--seed", "2", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() != (tmp_path / "b" / "trajectory.csv").read_bytes()


def test_run_records_overrides(tmp_path):
    code = main(["run", "--config", DIAMOND, "--out", str(tmp_path), "--set", "attack.strategy=constant", "--set", "attack.d=3"])
    assert code == 0
    assert manifest(tmp_path)["overrides"] == ["attack.strategy=constant", "attack.d=3"]
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["attack"]["d"] == 3
    schedule = (tmp_path / "schedule.csv").read_text().splitlines()
    assert schedule[0] == "t,d_t,d_eff,delivered_at" and schedule[1] == "1,3,3,3"


def test_missing_network_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"T": 10}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "/network" in capsys.readouterr().err


@pytest.mark.parametrize("args", [["--set", "attack.d=0"], ["--set", "nosuch.key=1"], ["--seed", "-1"], ["--jobs", "0"]])
def test_usage_errors_exit_2(tmp_path, args):
    assert main(["run", "--config", DIAMOND, "--out", str(tmp_path)] + args) == 2


def test_unreadable_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "x.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DMD_OUT_DIR", str(tmp_path / "env"))
    assert main(["run", "--config", DIAMOND, "--set", "T=20"]) == 0
    assert (tmp_path / "env" / "trajectory.csv").exists()


def test_verify_default_diamond(tmp_path, capsys):
    assert main(["verify", "--config", DIAMOND, "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "verify.json").read_text())
    assert report["trials"] == 100 and report["T"] == 200 and report["passed"]
    assert report["round_checks"] == 20_000 and report["lemma1"]["violations"] == 0


def test_verify_inflated_eta_fails_on_weights(tmp_path, capsys):
    assert main(["verify", "--config", DIAMOND, "--out", str(tmp_path), "--trials", "10", "--set", "solver.eta_scale=100"]) == 1
    out = capsys.readouterr().out
    assert "FAIL weights" in out and "t=1" in out
    report = json.loads((tmp_path / "verify.json").read_text())
    assert report["results"]["weights"] is False


def test_verify_zero_noise(tmp_path):
    assert main(["verify", "--config", SYMMETRIC, "--out", str(tmp_path), "--trials", "5"]) == 0


def test_sweep_short_grid_exits_2(tmp_path, capsys):
    assert main(["sweep", "--config", DIAMOND, "--out", str(tmp_path), "--grid", "256"]) == 2
    assert "grid length ≥ 4" in capsys.readouterr().err


def test_sweep_T_axis(tmp_path):
    code = main(["sweep", "--config", BRAESS, "--out", str(tmp_path), "--trials", "8", "--grid", "128,256,512,1024"])
    assert code == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "T,median_gap,q25,q75,bound,median_mean_flow_gap" and len(lines) == 5
    cells = (tmp_path / "sweep_cells.csv").read_text().splitlines()
    assert cells[0] == "trial,seed,T,d,gap,mean_flow_gap,bound,within_bound" and len(cells) == 33
    report = json.loads((tmp_path / "sweep.json").read_text())
    assert -0.65 <= report["slope"] <= -0.35


def test_sweep_d_axis(tmp_path):
    code = main(["sweep", "--config", BRAESS, "--out", str(tmp_path), "--trials", "20", "--axis", "d", "--grid", "1,2,4,8", "--set", "T=1000"])
    assert code == 0
    report = json.loads((tmp_path / "sweep.json").read_text())
    assert report["non_decreasing_in_d"] and report["medians_within_bound"]
    assert "attack.strategy=constant" in manifest(tmp_path)["overrides"]


def test_wanes_modes(tmp_path, capsys):
    assert main(["wanes", "--config", DIAMOND, "--out", str(tmp_path / "a"), "--epsilon", "inf"]) == 0
    data = json.loads((tmp_path / "a" / "wanes.json").read_text())
    assert data["probability"] == 1.0 and data["epsilon"] == "inf"
    assert main(["wanes", "--config", DIAMOND, "--out", str(tmp_path / "b")]) == 0
    data = json.loads((tmp_path / "b" / "wanes.json").read_text())
    assert data["epsilon"] == data["theoretical_epsilon"]
    median = sorted(data["gaps"])[50]
    assert main(["wanes", "--config", DIAMOND, "--out", str(tmp_path / "c"), "--epsilon", repr(0.25 * median)]) == 1


@pytest.mark.parametrize("args", [["--trials", "50"], ["--epsilon", "0"], ["--epsilon", "tight"]])
def test_wanes_usage_errors(tmp_path, args):
    assert main(["wanes", "--config", DIAMOND, "--out", str(tmp_path)] + args) == 2


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "dmdbench", "run", "--config", DIAMOND, "--out", str(tmp_path), "--set", "T=10"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert os.path.exists(tmp_path / "solution.json")
