"""Command-line contract: file layouts, exit codes, and reproducibility.

Everything runs through subprocess so the argv recorded in the manifest
matches what a shell user would produce.
"""

import filecmp
import json
import subprocess
import sys
from pathlib import Path

import pytest

CLI = [sys.executable, "-m", "schedfilt.cli"]


def run_cli(args, tmp, epoch="1700000000"):
    env = {
        "PATH": "/usr/bin:/bin:/usr/local/bin",
        "SOURCE_DATE_EPOCH": epoch,
        "SCHEDFILT_OUT": str(tmp / "default-out"),
    }
    return subprocess.run(
        CLI + args, capture_output=True, text=True, env=env, cwd=str(tmp)
    )


def read_manifest(out_dir: Path) -> dict:
    return json.loads((out_dir / "manifest.json").read_text())


def first_line(path: Path) -> str:
    return path.read_text().splitlines()[0]


def test_simulate_layout_and_headers(tmp_path):
    out = tmp_path / "sim"
    proc = run_cli(["simulate", "ou_kalman", "--paths", "2", "--out", str(out)], tmp_path)
    assert proc.returncode == 0, proc.stderr
    manifest = read_manifest(out)
    listed = set(manifest["outputs"])
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert listed == on_disk
    assert listed == {"path_0000.csv", "events_0000.csv", "path_0001.csv", "events_0001.csv"}
    assert first_line(out / "path_0000.csv") == "path_id,t,x_1,y_1,is_jump_time,event_index"
    assert first_line(out / "events_0000.csv") == "path_id,i,T_i,dY_1"
    assert manifest["subcommand"] == "simulate"
    assert manifest["created_unix"] == 1700000000


def test_manifest_hash_same_for_preset_and_file(tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    cfg = Path(__file__).resolve().parents[1] / "configs" / "ou_kalman.json"
    pa = run_cli(["simulate", "ou_kalman", "--paths", "1", "--out", str(out_a)], tmp_path)
    pb = run_cli(["simulate", str(cfg), "--paths", "1", "--out", str(out_b)], tmp_path)
    assert pa.returncode == 0 and pb.returncode == 0
    assert read_manifest(out_a)["scenario_sha256"] == read_manifest(out_b)["scenario_sha256"]
    # same scenario content means bit-identical data files
    assert filecmp.cmp(out_a / "path_0000.csv", out_b / "path_0000.csv", shallow=False)


def test_repeat_runs_are_byte_identical(tmp_path):
    outs = []
    for tag in ("r1", "r2"):
        out = tmp_path / tag
        proc = run_cli(
            ["filter", "ou_kalman", "--method", "kalman", "--out", str(out)], tmp_path
        )
        assert proc.returncode == 0, proc.stderr
        outs.append(out)
    names = {p.name for p in outs[0].iterdir()}
    assert names == {p.name for p in outs[1].iterdir()}
    for name in names:
        if name == "manifest.json":
            a = json.loads((outs[0] / name).read_text())
            b = json.loads((outs[1] / name).read_text())
            # identical except the user-chosen output directory in argv
            a["command"] = b["command"] = None
            assert a == b
        else:
            assert filecmp.cmp(outs[0] / name, outs[1] / name, shallow=False), name


def test_filter_all_methods(tmp_path):
    out = tmp_path / "fil"
    proc = run_cli(
        [
            "filter", "ou_kalman", "--method", "all",
            "--particles", "2000", "--nodes", "400", "--out", str(out),
        ],
        tmp_path,
    )
    assert proc.returncode == 0, proc.stderr
    names = {p.name for p in out.iterdir()}
    assert {
        "manifest.json", "events_used.csv", "comparison.csv",
        "kalman_trajectory.csv", "ks_trajectory.csv",
        "zakai_trajectory.csv", "grid_trajectory.csv",
    } <= names
    head = first_line(out / "comparison.csv").split(",")
    assert head[0] == "t"
    assert {"kalman_m", "ks_m", "zakai_m", "grid_m"} <= set(head)
    assert first_line(out / "ks_trajectory.csv") == "t,phi_name,estimate,bootstrap_se,ess,log_rho1"


def test_filter_events_round_trip(tmp_path):
    sim_out = tmp_path / "sim"
    run_cli(["simulate", "ou_kalman", "--paths", "1", "--out", str(sim_out)], tmp_path)
    direct = tmp_path / "direct"
    reload = tmp_path / "reload"
    pa = run_cli(
        ["filter", "ou_kalman", "--method", "kalman", "--out", str(direct)], tmp_path
    )
    pb = run_cli(
        [
            "filter", "ou_kalman", "--method", "kalman",
            "--events", str(sim_out / "events_0000.csv"),
            "--path-id", "0", "--out", str(reload),
        ],
        tmp_path,
    )
    assert pa.returncode == 0 and pb.returncode == 0
    assert filecmp.cmp(
        direct / "kalman_trajectory.csv", reload / "kalman_trajectory.csv", shallow=False
    )


def test_incompatible_method_exits_3(tmp_path):
    proc = run_cli(
        ["filter", "medical", "--method", "kalman", "--out", str(tmp_path / "x")], tmp_path
    )
    assert proc.returncode == 3
    assert "incompatible" in proc.stderr.lower()


def test_unknown_scenario_exits_2(tmp_path):
    proc = run_cli(["simulate", "no_such_scenario", "--out", str(tmp_path / "x")], tmp_path)
    assert proc.returncode == 2

    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    proc2 = run_cli(["simulate", str(bad), "--out", str(tmp_path / "y")], tmp_path)
    assert proc2.returncode == 2


def test_diagnose_pass_and_negative_control(tmp_path):
    out = tmp_path / "diag"
    proc = run_cli(
        [
            "diagnose", "ou_kalman", "--checks", "compensator",
            "--paths", "800", "--out", str(out),
        ],
        tmp_path,
    )
    assert proc.returncode == 0, proc.stderr
    report = json.loads((out / "diagnostics_report.json").read_text())
    assert report["all_passed"] is True
    assert report["checks"][0]["name"] == "compensator"

    nc_out = tmp_path / "diag-nc"
    proc_nc = run_cli(
        [
            "diagnose", "ou_kalman", "--checks", "compensator",
            "--paths", "2000", "--negative-control", "--out", str(nc_out),
        ],
        tmp_path,
    )
    assert proc_nc.returncode == 1
    nc_report = json.loads((nc_out / "diagnostics_report.json").read_text())
    assert nc_report["negative_control"] is True
    assert nc_report["all_passed"] is False


def test_help_and_version(tmp_path):
    proc = run_cli(["--help"], tmp_path)
    assert proc.returncode == 0
    for sub in ("simulate", "filter", "diagnose"):
        assert sub in proc.stdout
    ver = run_cli(["--version"], tmp_path)
    assert ver.returncode == 0
    assert "schedfilt" in ver.stdout
