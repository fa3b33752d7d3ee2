"""Generate demo outputs through the simulator CLI (the external interface)."""

import json
import subprocess

import pytest


def run_cli(*argv):
    proc = subprocess.run(["sounder", *argv], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


@pytest.fixture(scope="session")
def demo_outputs(tmp_path_factory):
    """Run the primary pipeline once: simulate the demo scene, estimate, plot inputs."""
    root = tmp_path_factory.mktemp("demo")

    sim_cfg = root / "sim.json"
    sim_cfg.write_text(json.dumps({
        "scene": "demo",
        "schedule": {"n_tx": 8, "n_rx": 8},
        "noise": {"mode": "snr", "snr_db": 30},
        "n_snapshots": 3,
        "pas": {"az_step_deg": 4.0, "el_step_deg": 10.0,
                "el_min_deg": -40.0, "el_max_deg": 40.0},
    }))
    sim_out = root / "sim"
    run_cli("simulate", "--config", str(sim_cfg), "--seed", "1",
            "--out", str(sim_out))

    est_cfg = root / "est.json"
    est_cfg.write_text(json.dumps({
        "cir": str(sim_out / "cir.bin"),
        "schedule_file": str(sim_out / "schedule.json"),
        "per_snapshot": True,
        "estimator": {"max_paths": 4},
    }))
    est_out = root / "est"
    run_cli("estimate", "--config", str(est_cfg), "--out", str(est_out))

    wf_cfg = root / "wf.json"
    wf_cfg.write_text(json.dumps({"n_tones": 64, "oversampling": 4,
                                  "phase_rule": "zadoff_chu_quadratic"}))
    wf_out = root / "wf"
    run_cli("waveform", "--config", str(wf_cfg), "--out", str(wf_out))

    amb_cfg = root / "amb.json"
    amb_cfg.write_text(json.dumps({"schedule": {"n_tx": 8, "n_rx": 8,
                                                "mode": "sequential"},
                                   "n_points": 501}))
    amb_out = root / "amb"
    run_cli("ambiguity", "--config", str(amb_cfg), "--seed", "0",
            "--out", str(amb_out))

    return {
        "pdp": sim_out / "pdp.csv",
        "pas": sim_out / "pas.csv",
        "tracks": est_out / "tracks.csv",
        "waveform": wf_out / "waveform.bin",
        "ambiguity": amb_out / "ambiguity.csv",
    }
