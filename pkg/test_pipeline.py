#!/usr/bin/env python3
"""
Test script for the haptic experiment pipeline
"""

import json

import pandas as pd
import pytest

from ethd.config import load_config
from ethd.errors import ConfigError
from haptic_pipeline import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, ExperimentPipeline, main

SMALL_RUN = {
    "experiment1": {"plate_set": "table2", "k_start": 400.0, "k_end": 1600.0, "k_step": 600.0,
                    "selection_levels": 3, "save_signals": True},
    "experiment2": {"plates": ["P1", "P5"], "references": [500.0, 1000.0], "runs_per_cell": 6},
    "stats": {"n_perm": 200},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_RUN))
    return path


def run(tmp_path, config_file, *args):
    out = tmp_path / "out"
    code = main(["--config", str(config_file), "--out", str(out), "--seed", "3", *args])
    return code, out


def test_calibrate_writes_artifacts(tmp_path, config_file):
    """Test the calibrate command end to end"""
    print("Testing calibration command...")
    code, out = run(tmp_path, config_file, "calibrate")
    assert code == EXIT_OK
    for name in ("calibration.csv", "compensator.json", "before_after.csv", "stiffness_comparison.csv",
                 "closure.csv", "trajectory.csv", "manifest.json"):
        assert (out / name).exists(), name

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "calibrate"
    assert manifest["seed"] == 3
    assert set(manifest["artifacts"]) >= {"calibration.csv", "compensator.json"}
    assert pd.read_csv(out / "closure.csv")["rel_error"].max() < 0.05


def test_manifest_reruns_identically(tmp_path, config_file):
    code, out = run(tmp_path, config_file, "calibrate", "--device", "identity")
    assert code == EXIT_OK
    first = json.loads((out / "manifest.json").read_text())
    assert first["config"]["device"]["saturation_coeffs"] == [0.0, 1.0, 0.0]

    # the manifest alone carries the chosen device
    rerun = tmp_path / "rerun"
    assert main(["--config", str(out / "manifest.json"), "--out", str(rerun), "calibrate"]) == EXIT_OK
    second = json.loads((rerun / "manifest.json").read_text())
    assert second["config"]["device"] == first["config"]["device"]
    assert second["artifacts"] == first["artifacts"]


def test_calibrate_with_device_file(tmp_path, config_file):
    device = tmp_path / "device.json"
    device.write_text(json.dumps({"device": {"max_force": 8.0, "viscous_damping": 25.0}}))
    code, out = run(tmp_path, config_file, "calibrate", "--device", str(device))
    assert code == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["device"]["max_force"] == 8.0
    assert manifest["config"]["device"]["viscous_damping"] == 25.0

    trajectory = pd.read_csv(out / "trajectory.csv")
    assert list(trajectory.columns) == ["t_s", "position_m", "velocity_mps", "force_N"]
    assert trajectory["force_N"].iloc[-1] == pytest.approx(0.981, rel=0.2)

    code, _ = run(tmp_path, config_file, "calibrate", "--device", str(tmp_path / "missing.json"))
    assert code == EXIT_CONFIG


def test_experiment1_small_grid(tmp_path, config_file):
    code, out = run(tmp_path, config_file, "--sequential", "exp1")
    assert code == EXIT_OK
    features = pd.read_csv(out / "features.csv")
    assert len(features) == 5 * 3
    assert features["n_taps"].min() >= 10
    assert list(pd.read_csv(out / "sc_vs_stiffness.csv").columns) == ["k_des_Npm", "P1", "P2", "P3", "P4", "P5"]
    assert len(pd.read_csv(out / "plate_selection.csv")) == 3
    report = (out / "anova_report.txt").read_text()
    assert "hardness: F(4,8)=" in report
    assert (out / "signals" / "P1_400.csv").exists()


def test_experiment1_parallel_matches_sequential(tmp_path, config_file):
    seq = tmp_path / "seq"
    par = tmp_path / "par"
    base = ["--config", str(config_file), "--seed", "1"]
    assert main(base + ["--out", str(seq), "--sequential", "exp1", "--plates", "table2"]) == EXIT_OK
    assert main(base + ["--out", str(par), "--max-workers", "3", "exp1", "--plates", "table2"]) == EXIT_OK
    assert (seq / "features.csv").read_bytes() == (par / "features.csv").read_bytes()


def test_experiment2_small_grid(tmp_path, config_file):
    code, out = run(tmp_path, config_file, "exp2", "--runs-per-cell", "8")
    assert code == EXIT_OK
    runs = pd.read_csv(out / "weber_runs.csv")
    assert len(runs) == 2 * 2 * 8
    assert runs["tap_duration_ms"].between(20.0, 288.0).all()
    assert runs["duration_class"].notna().all()
    summary = pd.read_csv(out / "weber_summary.csv")
    assert list(summary["plate"]) == ["P1", "P1", "P5", "P5"]
    assert (out / "anova_wf.csv").exists()
    assert (out / "pairwise_plates.csv").exists()


def test_experiment2_single_run_keeps_trial_logs(tmp_path, config_file):
    code, out = run(tmp_path, config_file, "exp2", "--runs-per-cell", "1")
    assert code == EXIT_OK
    logs = sorted((out / "trial_logs").glob("*.csv"))
    assert len(logs) == 4


def test_analyze_and_stats_commands(tmp_path, config_file):
    code, out = run(tmp_path, config_file, "exp1")
    assert code == EXIT_OK

    analyze_out = tmp_path / "analyze"
    assert main(["--out", str(analyze_out), "analyze", str(out / "signals" / "P3_1000.csv")]) == EXIT_OK
    row = pd.read_csv(analyze_out / "features.csv").iloc[0]
    assert row["plate"] == "P3"

    table = tmp_path / "table.csv"
    pd.DataFrame({
        "factor_a": ["x"] * 3 + ["y"] * 3,
        "value": [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
    }).to_csv(table, index=False)
    stats_out = tmp_path / "stats"
    assert main(["--out", str(stats_out), "stats", str(table)]) == EXIT_OK
    assert "factor_a: F(1,4)=13.50" in (stats_out / "anova_report.txt").read_text()


def test_exit_codes(tmp_path, config_file):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"experiment9": {}}))
    assert main(["--config", str(bad), "--out", str(tmp_path / "o"), "calibrate"]) == EXIT_CONFIG
    assert main(["--out", str(tmp_path / "o"), "--log-level", "LOUD", "calibrate"]) == EXIT_CONFIG
    assert main(["--out", str(tmp_path / "o"), "analyze", str(tmp_path / "missing.csv")]) == EXIT_IO

    constant = tmp_path / "constant.csv"
    pd.DataFrame({"factor_a": ["x", "x", "y", "y"], "value": [1.0] * 4}).to_csv(constant, index=False)
    assert main(["--out", str(tmp_path / "o"), "stats", str(constant)]) == EXIT_NUMERIC

    blocked = tmp_path / "blocked"
    blocked.write_text("not a directory")
    assert main(["--out", str(blocked / "out"), "calibrate", "--device", "identity"]) == EXIT_IO


def test_config_layers(tmp_path, config_file):
    config = load_config(config_file, env={"ETHD_SEED": "11", "ETHD_MAX_WORKERS": "2"}, seed=5)
    assert config.seed == 5
    assert config.max_workers == 2
    assert config.experiment2.runs_per_cell == 6
    with pytest.raises(ConfigError):
        load_config(config_file, env={"ETHD_SEED": "eleven"})
    with pytest.raises(ConfigError):
        load_config(None, env={}, format="xml")


def test_pipeline_isolates_failing_cells():
    """A failing cell is recorded and the others still finish"""
    def work(cell):
        plate, k = cell
        if plate == "bad":
            raise ConfigError("boom")
        return k * 2

    pipeline = ExperimentPipeline(max_workers=2)
    cells = [("P1", 1.0), ("bad", 2.0), ("P2", 3.0)]
    results = pipeline.run(cells, work, "Check")
    assert [r["index"] for r in results] == [0, 1, 2]
    assert [r["success"] for r in results] == [True, False, True]
    assert results[2]["value"] == 6.0
    assert pipeline.stats["failed"] == 1


@pytest.mark.parametrize("parallel", [False, True])
def test_unexpected_errors_fail_only_their_cell(parallel):
    def work(cell):
        plate, k = cell
        if plate == "bad":
            raise ZeroDivisionError("k / 0")
        return k * 2

    pipeline = ExperimentPipeline(max_workers=2)
    results = pipeline.run([("P1", 1.0), ("bad", 2.0), ("P2", 3.0)], work, "Check", use_parallel=parallel)
    assert [r["success"] for r in results] == [True, False, True]
    assert "k / 0" in results[1]["message"]
    assert pipeline.stats["failed"] == 1
    assert pipeline.stats["processed"] == 2


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
