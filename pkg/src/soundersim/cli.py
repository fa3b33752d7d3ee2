"""Command-line orchestration: generate artifacts, simulate, estimate, report.

Subcommands: waveform, codebook, simulate, estimate, budget, ambiguity, track.
Configs are JSON documents validated against per-command schemas before any
computation; unknown keys are rejected.  Every command writes its outputs plus
a manifest with SHA-256 checksums, and identical config + seed reproduces
byte-identical payloads regardless of --threads.

Exit codes: 0 success, 2 input/validation error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import hashlib
import importlib.resources
import json
import os
import sys

import numpy as np
import jsonschema

from . import arrays as _arrays
from . import channel as _channel
from . import estimation as _est
from . import schedule as _sched
from . import sounder as _snd
from . import waveform as _wf

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(Exception):
    pass


class NumericalError(Exception):
    pass


# ---------------------------------------------------------------------------
# config schemas

_FRAME_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seq_duration_s": {"type": "number", "exclusiveMinimum": 0},
        "n_core": {"type": "integer", "minimum": 1},
        "n_margin_head": {"type": "integer", "minimum": 0},
        "n_sync_tail": {"type": "integer", "minimum": 0},
        "guard_s": {"type": "number", "minimum": 0},
    },
}

_CODEBOOK_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "n_tx": {"type": "integer", "minimum": 1},
        "n_rx": {"type": "integer", "minimum": 1},
        "dual_pol": {"type": "boolean"},
        "mode": {"enum": ["sequential", "pseudo_random"]},
        "frame": _FRAME_SCHEMA,
    },
}

_ARRAY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["upa", "single", "paper_tx", "paper_rx", "calibration"]},
        "n_y": {"type": "integer", "minimum": 1},
        "n_z": {"type": "integer", "minimum": 1},
        "spacing_m": {"type": "number", "exclusiveMinimum": 0},
        "isotropic": {"type": "boolean"},
        "hpbw_az_deg": {"type": "number", "exclusiveMinimum": 0, "maximum": 180},
        "hpbw_el_deg": {"type": "number", "exclusiveMinimum": 0, "maximum": 180},
        "xpd_db": {"type": "number", "minimum": 0},
        "frequency_hz": {"type": "number", "exclusiveMinimum": 0},
        "calibration_dir": {"type": "string"},
        "truncation": {"type": "array", "items": {"type": "integer", "minimum": 0},
                       "minItems": 2, "maxItems": 2},
    },
}

_NOISE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": ["off", "snr", "noise_power", "physical"]},
        "snr_db": {"type": "number"},
        "noise_power": {"type": "number", "minimum": 0},
        "pathloss_db": {"type": "number"},
        "budget": {"$ref": "#/$defs/budget"},
        "lo_phase_jitter_rad": {"type": "number", "minimum": 0},
    },
}

_BUDGET_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "noise_figure_db": {"type": "number"},
        "bandwidth_hz": {"type": "number", "exclusiveMinimum": 0},
        "eirp_dbm": {"type": "number"},
        "rx_array_gain_db": {"type": "number"},
        "saturation_dbm": {"type": "number"},
    },
}

_ESTIMATOR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "max_paths": {"type": "integer", "minimum": 0},
        "margin_db": {"type": "number"},
        "doppler_search": {"type": ["boolean", "null"]},
        "doppler_max_hz": {"type": ["number", "null"]},
        "coarse_angle_step_deg": {"type": "number", "exclusiveMinimum": 0},
        "refine_iters": {"type": "integer", "minimum": 1},
        "refine_cycles": {"type": "integer", "minimum": 0},
        "pol": {"enum": ["auto", "scalar_h", "scalar_v", "full"]},
    },
}

SCHEMAS = {
    "waveform": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "n_tones": {"type": "integer", "minimum": 1},
            "tone_spacing_hz": {"type": "number", "exclusiveMinimum": 0},
            "center_offset_hz": {"type": "number"},
            "oversampling": {"type": "integer", "minimum": 1},
            "phase_rule": {"enum": ["papr_optimized", "zadoff_chu_quadratic"]},
            "root": {"type": "integer", "minimum": 1},
        },
    },
    "codebook": _CODEBOOK_SCHEMA,
    "budget": _BUDGET_SCHEMA,
    "simulate": {
        "type": "object",
        "additionalProperties": False,
        "$defs": {"budget": _BUDGET_SCHEMA},
        "properties": {
            "scene": {"type": ["string", "object"]},
            "schedule": _CODEBOOK_SCHEMA,
            "waveform": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "oversampling": {"type": "integer", "minimum": 1},
                    "phase_rule": {"enum": ["papr_optimized", "zadoff_chu_quadratic"]},
                },
            },
            "tx_array": _ARRAY_SCHEMA,
            "rx_array": _ARRAY_SCHEMA,
            "noise": _NOISE_SCHEMA,
            "n_snapshots": {"type": "integer", "minimum": 1},
            "pas": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "az_step_deg": {"type": "number", "exclusiveMinimum": 0},
                    "el_step_deg": {"type": "number", "exclusiveMinimum": 0},
                    "el_min_deg": {"type": "number"},
                    "el_max_deg": {"type": "number"},
                },
            },
        },
        "required": ["scene"],
    },
    "estimate": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "cir": {"type": "string"},
            "schedule_file": {"type": "string"},
            "tx_array": _ARRAY_SCHEMA,
            "rx_array": _ARRAY_SCHEMA,
            "estimator": _ESTIMATOR_SCHEMA,
            "per_snapshot": {"type": "boolean"},
            "fit_dense": {"type": "boolean"},
            "track": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "gate_delay_ns": {"type": "number", "exclusiveMinimum": 0},
                    "gate_az_deg": {"type": "number", "exclusiveMinimum": 0},
                    "gate_el_deg": {"type": "number", "exclusiveMinimum": 0},
                    "report_threshold_db": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
        "required": ["cir", "schedule_file"],
    },
    "ambiguity": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "schedule": _CODEBOOK_SCHEMA,
            "n_snapshots": {"type": "integer", "minimum": 1},
            "max_doppler_hz": {"type": ["number", "null"]},
            "n_points": {"type": "integer", "minimum": 2},
        },
    },
    "track": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "results_file": {"type": "string"},
            "gate_delay_ns": {"type": "number", "exclusiveMinimum": 0},
            "gate_az_deg": {"type": "number", "exclusiveMinimum": 0},
            "gate_el_deg": {"type": "number", "exclusiveMinimum": 0},
            "report_threshold_db": {"type": "number", "exclusiveMinimum": 0},
        },
        "required": ["results_file"],
    },
}


def _validate(command: str, config: dict) -> dict:
    try:
        jsonschema.validate(config, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config schema error: {exc.message}") from exc
    return config


# ---------------------------------------------------------------------------
# helpers

def _load_config(args) -> dict:
    if args.config is None:
        return {}
    try:
        with open(args.config) as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: str, command: str, config: dict, seed, outputs):
    manifest = {
        "schema": "run-manifest/1",
        "command": command,
        "seed": seed,
        "config": config,
        "outputs": {
            name: {"path": os.path.basename(p), "sha256": _sha256(p),
                   "bytes": os.path.getsize(p)}
            for name, p in outputs.items()
        },
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


def _build_frame(cfg: dict) -> _sched.FrameSpec:
    return _sched.FrameSpec(**cfg.get("frame", {}))


def _build_schedule(cfg: dict, seed) -> _sched.SwitchSchedule:
    cb = _sched.gen_codebook(
        seed=cfg.get("seed", seed if seed is not None else 0),
        n_tx=cfg.get("n_tx", 8), n_rx=cfg.get("n_rx", 8),
        dual_pol=cfg.get("dual_pol", False),
        mode=cfg.get("mode", "pseudo_random"))
    return _sched.snapshot_timing(cb, _build_frame(cfg))


def _build_array(cfg: dict) -> _arrays.Eadf:
    kind = cfg.get("kind", "upa")
    fc = cfg.get("frequency_hz", 28e9)
    spacing = cfg.get("spacing_m", _arrays.C0 / fc / 2)
    if kind == "calibration":
        if "calibration_dir" not in cfg:
            raise ConfigError("calibration arrays need calibration_dir")
        grid = _arrays.load_calibration(cfg["calibration_dir"])
        trunc = tuple(cfg["truncation"]) if "truncation" in cfg else None
        return _arrays.compute_eadf(grid, trunc)
    if kind == "single":
        geo = _arrays.ArrayGeometry.single()
    elif kind == "paper_tx":
        geo = _arrays.ArrayGeometry.panel_rectangle(spacing_m=spacing)
    elif kind == "paper_rx":
        geo = _arrays.ArrayGeometry.octagon(spacing_m=spacing)
    else:
        geo = _arrays.ArrayGeometry.upa(cfg.get("n_y", 4), cfg.get("n_z", 2), spacing)
    kwargs = {"frequencies_hz": (fc,)}
    for key in ("hpbw_az_deg", "hpbw_el_deg", "xpd_db"):
        if key in cfg:
            kwargs[key] = cfg[key]
    return _arrays.desk_eadf(geo, isotropic=cfg.get("isotropic", False), **kwargs)


def _build_noise(cfg: dict) -> _snd.NoiseSpec:
    kwargs = dict(cfg)
    if "budget" in kwargs:
        kwargs["budget"] = _snd.LinkBudget(**kwargs["budget"])
    return _snd.NoiseSpec(**kwargs)


def _resolve_scene(spec) -> _channel.ChannelScene:
    if isinstance(spec, dict):
        return _channel.scene_from_json(spec)
    if spec == "demo":
        ref = importlib.resources.files("soundersim").joinpath("data/demo_scene.json")
        return _channel.scene_from_json(json.loads(ref.read_text()))
    if not os.path.exists(spec):
        raise ConfigError(f"scene file not found: {spec}")
    return _channel.scene_from_json(spec)


# ---------------------------------------------------------------------------
# commands

def cmd_waveform(config: dict, out_dir: str, seed, threads: int, verbose: bool) -> int:
    cfg = _validate("waveform", config)
    grid = _wf.ToneGrid(n_tones=cfg.get("n_tones", 2002),
                        tone_spacing_hz=cfg.get("tone_spacing_hz", 5.0e5),
                        center_offset_hz=cfg.get("center_offset_hz", 0.0))
    w = _wf.gen_multitone(grid, oversampling=cfg.get("oversampling", 4),
                          phase_rule=cfg.get("phase_rule", "papr_optimized"),
                          root=cfg.get("root", 1))
    papr = _wf.papr_db(w)
    flat = _wf.spectrum_flatness_db(w)
    bin_path, meta_path = _wf.save_waveform(
        w, os.path.join(out_dir, "waveform.bin"))
    report = {
        "papr_db": papr,
        "reference_papr_db": 0.349,
        "spectrum_flatness_db": flat,
        "duration_s": w.duration_s,
        "sample_rate_hz": w.sample_rate_hz,
    }
    report_path = os.path.join(out_dir, "papr_report.json")
    with open(report_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_manifest(out_dir, "waveform", cfg, seed,
                    {"waveform_bin": bin_path, "waveform_meta": meta_path,
                     "papr_report": report_path})
    print(f"PAPR {papr:.4f} dB (reference optimized sequence: 0.349 dB); "
          f"flatness {flat:.3e} dB")
    return EXIT_OK


def cmd_codebook(config: dict, out_dir: str, seed, threads: int, verbose: bool) -> int:
    cfg = _validate("codebook", config)
    schedule = _build_schedule(cfg, seed)
    path = _sched.save_schedule(schedule, os.path.join(out_dir, "schedule.json"))
    _write_manifest(out_dir, "codebook", cfg, seed, {"schedule": path})
    print(f"{len(schedule)} entries, frame {schedule.frame.frame_duration_ns} ns, "
          f"snapshot {schedule.snapshot_duration_s * 1e3:.4f} ms")
    return EXIT_OK


def cmd_budget(config: dict, out_dir: str, seed, threads: int, verbose: bool) -> int:
    cfg = _validate("budget", config)
    budget = _snd.LinkBudget(**cfg)
    report = _snd.link_budget_report(budget)
    path = os.path.join(out_dir, "budget.json")
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_manifest(out_dir, "budget", cfg, seed, {"budget": path})
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_simulate(config: dict, out_dir: str, seed, threads: int, verbose: bool) -> int:
    cfg = _validate("simulate", config)
    seed = 0 if seed is None else seed
    scene = _resolve_scene(cfg["scene"])
    schedule = _build_schedule(cfg.get("schedule", {}), seed)
    wf_cfg = cfg.get("waveform", {})
    grid = _wf.ToneGrid(n_tones=scene.m_f, tone_spacing_hz=scene.tone_spacing_hz)
    w = _wf.gen_multitone(grid, oversampling=wf_cfg.get("oversampling", 1),
                          phase_rule=wf_cfg.get("phase_rule", "zadoff_chu_quadratic"))
    tx_eadf = _build_array(cfg.get("tx_array", {}))
    rx_eadf = _build_array(cfg.get("rx_array", {}))
    noise = _build_noise(cfg.get("noise", {}))
    try:
        cir = _snd.acquire(scene, schedule, w, tx_eadf, rx_eadf, noise,
                           n_snapshots=cfg.get("n_snapshots", 1), seed=seed,
                           threads=threads)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericalError(str(exc)) from exc

    sched_path = _sched.save_schedule(schedule, os.path.join(out_dir, "schedule.json"))
    bin_path, meta_path = _snd.save_cir(cir, os.path.join(out_dir, "cir.bin"))
    pdp_path = _snd.pdp_to_csv(cir, os.path.join(out_dir, "pdp.csv"))
    pas_cfg = cfg.get("pas", {})
    az = np.deg2rad(np.arange(-180.0, 180.0, pas_cfg.get("az_step_deg", 2.0)))
    el = np.deg2rad(np.arange(pas_cfg.get("el_min_deg", -60.0),
                              pas_cfg.get("el_max_deg", 60.0) + 1e-9,
                              pas_cfg.get("el_step_deg", 5.0)))
    spectrum = _snd.pas(cir, rx_eadf, az, el)
    pas_path = _snd.pas_to_csv(spectrum, az, el, os.path.join(out_dir, "pas.csv"))
    _write_manifest(out_dir, "simulate", cfg, seed,
                    {"schedule": sched_path, "cir_bin": bin_path,
                     "cir_meta": meta_path, "pdp_csv": pdp_path,
                     "pas_csv": pas_path})
    prof = _snd.pdp(cir)
    print(f"snapshots {cir.n_snapshots}, PDP peak bin "
          f"{int(np.argmax(prof))} ({np.argmax(prof) * cir.delay_step_s * 1e9:.2f} ns)")
    return EXIT_OK


def cmd_estimate(config: dict, out_dir: str, seed, threads: int, verbose: bool) -> int:
    cfg = _validate("estimate", config)
    if not os.path.exists(cfg["cir"]):
        raise ConfigError(f"CIR payload not found: {cfg['cir']}")
    try:
        cir = _snd.load_cir(cfg["cir"])
    except (ValueError, json.JSONDecodeError, FileNotFoundError, KeyError) as exc:
        raise ConfigError(f"cannot load CIR tensor: {exc}") from exc
    try:
        schedule = _sched.load_schedule(cfg["schedule_file"])
    except (ValueError, json.JSONDecodeError, FileNotFoundError, KeyError) as exc:
        raise ConfigError(f"cannot load schedule: {exc}") from exc
    tx_eadf = _build_array(cfg.get("tx_array", {}))
    rx_eadf = _build_array(cfg.get("rx_array", {}))
    est_cfg = _est.EstimatorConfig(**cfg.get("estimator", {}))

    outputs = {}
    try:
        if cfg.get("per_snapshot", False):
            results = [
                _est.estimate_specular(cir, tx_eadf, rx_eadf, schedule,
                                       config=est_cfg, snapshots=[s])
                for s in range(cir.n_snapshots)
            ]
            times = [s * schedule.snapshot_duration_s for s in range(cir.n_snapshots)]
            doc = {
                "schema": "estimation-result-series/1",
                "snapshot_times_s": times,
                "results": [_est.result_to_json(r) for r in results],
            }
            res_path = os.path.join(out_dir, "result.json")
            with open(res_path, "w") as f:
                json.dump(doc, f, indent=1, sort_keys=True)
                f.write("\n")
            outputs["result"] = res_path
            tr_cfg = cfg.get("track", {})
            tracks = _est.track_aoa(results, times, **tr_cfg)
            outputs["tracks"] = _est.tracks_to_csv(
                tracks, os.path.join(out_dir, "tracks.csv"))
            n_paths = sum(len(r.paths) for r in results)
        else:
            result = _est.estimate_specular(cir, tx_eadf, rx_eadf, schedule,
                                            config=est_cfg)
            if cfg.get("fit_dense", True):
                resid = _est.residual_cir(cir, result, tx_eadf, rx_eadf, schedule)
                result.dense_fit, dd = _est.estimate_dense(resid, tx_eadf, rx_eadf)
                result.diagnostics.update({f"dense_{k}": v for k, v in dd.items()})
            res_path = os.path.join(out_dir, "result.json")
            _est.result_to_json(result, res_path)
            outputs["result"] = res_path
            n_paths = len(result.paths)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        raise NumericalError(f"estimation failed: {exc}") from exc
    _write_manifest(out_dir, "estimate", cfg, seed, outputs)
    print(f"estimated {n_paths} path(s)")
    return EXIT_OK


def cmd_ambiguity(config: dict, out_dir: str, seed, threads: int, verbose: bool) -> int:
    cfg = _validate("ambiguity", config)
    schedule = _build_schedule(cfg.get("schedule", {}), seed)
    nu_max = cfg.get("max_doppler_hz") or 1.0 / (2 * schedule.frame.frame_duration_s)
    grid = np.linspace(0.0, nu_max, cfg.get("n_points", 2001))
    amb = _est.doppler_ambiguity(schedule, grid, n_snapshots=cfg.get("n_snapshots", 1))
    path = os.path.join(out_dir, "ambiguity.csv")
    with open(path, "w") as f:
        f.write("doppler_hz,magnitude\n")
        for nu, m in zip(amb.doppler_grid_hz, amb.magnitude):
            f.write(f"{nu:.6f},{m:.9f}\n")
    _write_manifest(out_dir, "ambiguity", cfg, seed, {"ambiguity": path})
    print(f"{len(grid)} Doppler points up to {nu_max:.1f} Hz")
    return EXIT_OK


def cmd_track(config: dict, out_dir: str, seed, threads: int, verbose: bool) -> int:
    cfg = _validate("track", config)
    try:
        with open(cfg["results_file"]) as f:
            doc = json.load(f)
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read results: {exc}") from exc
    if doc.get("schema") != "estimation-result-series/1":
        raise ConfigError("expected an estimation-result-series/1 document")
    results = []
    for rd in doc["results"]:
        paths = [
            _est.PathEstimate(
                delay_s=p["delay_ns"] * 1e-9,
                aoa_az_rad=np.deg2rad(p["aoa_az_deg"]),
                aoa_el_rad=np.deg2rad(p["aoa_el_deg"]),
                aod_az_rad=np.deg2rad(p["aod_az_deg"]),
                aod_el_rad=np.deg2rad(p["aod_el_deg"]),
                doppler_hz=p["doppler_hz"],
                gain=np.array([[complex(a, b) for a, b in row] for row in p["gain"]]),
                power=10 ** (p["power_db"] / 10), improvement=p["improvement"])
            for p in rd["paths"]
        ]
        results.append(_est.EstimationResult(paths=paths))
    gates = {k: cfg[k] for k in ("gate_delay_ns", "gate_az_deg", "gate_el_deg",
                                 "report_threshold_db") if k in cfg}
    tracks = _est.track_aoa(results, doc["snapshot_times_s"], **gates)
    path = _est.tracks_to_csv(tracks, os.path.join(out_dir, "tracks.csv"))
    _write_manifest(out_dir, "track", cfg, seed, {"tracks": path})
    print(f"{len(tracks)} track(s)")
    return EXIT_OK


COMMANDS = {
    "waveform": cmd_waveform,
    "codebook": cmd_codebook,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "budget": cmd_budget,
    "ambiguity": cmd_ambiguity,
    "track": cmd_track,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sounder",
        description="Switched-array channel sounder software twin")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config file", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)

    try:
        config = _load_config(args)
        if not isinstance(config, dict):
            raise ConfigError("config root must be a JSON object")
        os.makedirs(args.out, exist_ok=True)
        if args.verbose:
            print(f"{args.command} seed={args.seed} threads={args.threads} "
                  f"config={json.dumps(config, sort_keys=True)}", file=sys.stderr)
        return COMMANDS[args.command](config, args.out, args.seed,
                                      max(args.threads, 1), args.verbose)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, TypeError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
