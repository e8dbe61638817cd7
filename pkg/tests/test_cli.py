from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from tssrp.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
DESK = str(CONFIGS / "desk.toml")

SMALL = """
[scenario]
K = 4
q = 2
gamma = 30
n_changes = 1
nu = 1
replications = 40
seed = 3

[models]
post_mean = 1.5

[prior]
name = "G2"

[rule]
r = 1

[calibration]
reps = 100
horizon = 100000
seed = 2
"""


@pytest.fixture
def small(tmp_path) -> str:
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return str(path)


def records(path: Path, shift_at: int | None = None, n: int = 300) -> str:
    x = np.random.default_rng(0).standard_normal((n, 5))
    if shift_at is not None:
        x[shift_at - 1:, :2] += 2.0
    path.write_text("".join(json.dumps({"t": t, "values": [float(v) for v in row]}) + "\n" for t, row in enumerate(x, 1)))
    return str(path)


def test_monitor_without_alarm_exits_zero(tmp_path, capsys):
    assert main(["monitor", DESK, "--threshold", "1e300", "--input", records(tmp_path / "r.ndjson")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["alarm"] is False and out["steps"] == 300


def test_monitor_alarm_exits_two(tmp_path, capsys):
    alarm = tmp_path / "alarm.json"
    trace = tmp_path / "trace.csv"
    code = main(["monitor", DESK, "--input", records(tmp_path / "r.ndjson", 50), "--alarm-out", str(alarm), "--trace", str(trace)])
    assert code == 2
    report = json.loads(alarm.read_text())
    assert report["alarm_time"] >= 50 and report["top_r_streams"][0]["stream"] in (1, 2)
    assert trace.read_text().splitlines()[0] == "t,stat,threshold,level,layout"
    assert json.loads(capsys.readouterr().out) == report


def test_missing_value_exits_six(tmp_path, capsys):
    bad = tmp_path / "bad.ndjson"
    bad.write_text('{"t": 1, "values": {}}\n')
    assert main(["monitor", DESK, "--threshold", "10", "--input", str(bad)]) == 6
    assert "t=1" in capsys.readouterr().err


def test_out_of_order_exits_seven(tmp_path):
    bad = tmp_path / "bad.ndjson"
    bad.write_text('{"t": 2, "values": [0, 0, 0, 0, 0]}\n')
    assert main(["monitor", DESK, "--threshold", "10", "--input", str(bad)]) == 7


def test_config_problems_exit_four(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(SMALL.replace("q = 2", "q = 9"))
    assert main(["simulate", str(bad), "--threshold", "10"]) == 4
    assert "scenario.q" in capsys.readouterr().err


def test_missing_threshold_is_a_config_error(small):
    assert main(["simulate", small]) == 4


def test_changes_need_a_finite_change_time(tmp_path, capsys):
    assert main(["simulate", DESK, "--changes", "1,2", "--out", str(tmp_path)]) == 4
    assert "scenario.nu" in capsys.readouterr().err


def test_calibrate_then_simulate_then_report(small, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["calibrate", small, "--out", str(out)]) == 0
    cal = json.loads((out / "calibration.json").read_text())
    assert cal["arl_estimate"] >= 30 and cal["algorithm"] == "TSSRP"
    code = main(["simulate", small, "--calibration", str(out / "calibration.json"), "--changes", "1,2", "--out", str(out)])
    assert code == 0
    names = sorted(p.name for p in out.iterdir())
    assert "report_TSSRP_G2_m1.json" in names and "delays_TSSRP_G2_m2.csv" in names
    manifest = json.loads((out / "manifest_simulate.json").read_text())
    report = json.loads((out / "report_TSSRP_G2_m1.json").read_text())
    assert report["manifest"] == manifest["digest"]
    capsys.readouterr()
    csv_path = tmp_path / "table.csv"
    assert main(["report", str(out), "--csv", str(csv_path)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[1].split() == ["changes", "1", "2"] and table[2].startswith("TSSRP(G2)")
    assert len(csv_path.read_text().splitlines()) == 3


def test_simulate_outputs_do_not_depend_on_workers(small, tmp_path):
    for w in (1, 2):
        assert main(["simulate", small, "--threshold", "50", "--workers", str(w), "--out", str(tmp_path / f"w{w}")]) == 0
    files = sorted(p.name for p in (tmp_path / "w1").iterdir() if not p.name.startswith("manifest"))
    assert files
    for name in files:
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w2" / name).read_bytes()


def test_report_with_nothing_to_read_exits_six(tmp_path):
    assert main(["report", str(tmp_path)]) == 6


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "tssrp", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    for cmd in ("calibrate", "simulate", "monitor", "report", "verify"):
        assert cmd in done.stdout
