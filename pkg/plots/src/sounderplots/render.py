"""Render sounder-simulation output files to figures.

Five plot kinds consume the CSV/JSON/binary formats written by the simulator
CLI: delay profiles, angular-spectrum heatmaps, time-variant azimuth tracks,
waveform quadrature magnitude, and Doppler-ambiguity curves.  The renderer
never recomputes physics: every annotated number is read from, or is an
argmax/threshold over, the input file.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import csv
import json
import os

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class SchemaError(Exception):
    """Input file does not match the producing module's documented format."""


PLOT_KINDS = ("pdp", "pas", "aoa_track", "waveform", "ambiguity")


@dataclass
class PlotJob:
    kind: str
    in_path: str
    out_path: str
    threshold_db: float = 30.0      # display cutoff below the maximum
    title: str | None = None
    extra_inputs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PLOT_KINDS:
            raise SchemaError(f"unknown plot kind {self.kind!r}")
        if self.threshold_db <= 0:
            raise SchemaError("threshold_db must be positive")


# ---------------------------------------------------------------------------
# input readers (strict about the documented column layouts)

def _read_csv(path, expected_header):
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise SchemaError(f"{path}: empty file, expected header "
                          f"{','.join(expected_header)}")
    if rows[0] != list(expected_header):
        raise SchemaError(f"{path}: header {rows[0]} does not match expected "
                          f"{list(expected_header)}")
    data = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(expected_header):
            raise SchemaError(f"{path}: line {i} has {len(row)} fields, "
                              f"expected {len(expected_header)}")
        try:
            data.append([float(v) for v in row])
        except ValueError as exc:
            raise SchemaError(f"{path}: line {i}: non-numeric field") from exc
    return np.array(data).reshape(-1, len(expected_header))


def _read_waveform(bin_path):
    meta_path = bin_path.rsplit(".", 1)[0] + ".json"
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read waveform sidecar {meta_path}: {exc}") from exc
    for key in ("n_samples", "sample_rate_hz", "n_tones", "phase_rule"):
        if key not in meta:
            raise SchemaError(f"{meta_path}: missing field {key!r}")
    iq = np.frombuffer(open(bin_path, "rb").read(), dtype="<f4")
    if iq.size != 2 * meta["n_samples"]:
        raise SchemaError(f"{bin_path}: payload size does not match the "
                          f"sidecar field 'n_samples'")
    samples = iq[0::2] + 1j * iq[1::2]
    return samples, meta


# ---------------------------------------------------------------------------
# the five renderers

def _render_pdp(job: PlotJob, ax):
    data = _read_csv(job.in_path, ("delay_ns", "power_db"))
    delay, power = data[:, 0], data[:, 1]
    ax.plot(delay, power, lw=1.2)
    ann = {}
    if len(power):
        k = int(np.argmax(power))
        ann = {"peak_delay_ns": float(delay[k]), "peak_power_db": float(power[k])}
        ax.annotate(f"peak {delay[k]:.1f} ns",
                    xy=(delay[k], power[k]), xytext=(10, -4),
                    textcoords="offset points", fontsize=9)
        ax.plot([delay[k]], [power[k]], "v", ms=6)
        floor = power.max() - job.threshold_db
        ax.set_ylim(bottom=max(power.min(), floor) - 3)
    ax.set_xlabel("delay (ns)")
    ax.set_ylabel("power (dB)")
    ax.set_title(job.title or "power delay profile")
    ax.grid(alpha=0.3)
    return ann


def _render_pas(job: PlotJob, ax):
    data = _read_csv(job.in_path, ("az_deg", "el_deg", "power_db"))
    if len(data) == 0:
        ax.set_xlabel("azimuth (deg)")
        ax.set_ylabel("elevation (deg)")
        return {}
    az = np.unique(data[:, 0])
    el = np.unique(data[:, 1])
    if len(az) * len(el) != len(data):
        raise SchemaError(f"{job.in_path}: rows do not form a full "
                          f"az_deg x el_deg grid")
    grid = data[:, 2].reshape(len(az), len(el))
    vmax = grid.max()
    im = ax.pcolormesh(az, el, grid.T, vmin=vmax - job.threshold_db, vmax=vmax,
                       shading="nearest", cmap="viridis")
    plt.colorbar(im, ax=ax, label="power (dB)")
    i, j = np.unravel_index(np.argmax(grid), grid.shape)
    ax.plot([az[i]], [el[j]], "r+", ms=12)
    ax.annotate(f"peak ({az[i]:.0f}, {el[j]:.0f}) deg", xy=(az[i], el[j]),
                xytext=(8, 8), textcoords="offset points", color="w", fontsize=9)
    ax.set_xlabel("azimuth (deg)")
    ax.set_ylabel("elevation (deg)")
    ax.set_title(job.title or "power angular spectrum")
    return {"peak_az_deg": float(az[i]), "peak_el_deg": float(el[j]),
            "peak_power_db": float(vmax)}


def _render_aoa_track(job: PlotJob, ax):
    data = _read_csv(job.in_path, ("time_s", "track_id", "az_deg", "el_deg",
                                   "delay_ns", "power_db"))
    ax.set_xlabel("time (s)")
    ax.set_ylabel("azimuth AOA (deg)")
    ax.set_title(job.title or "azimuth AOA over time")
    ax.grid(alpha=0.3)
    if len(data) == 0:
        return {}
    power = data[:, 5]
    vmax = power.max()
    keep = power >= vmax - job.threshold_db
    kept = data[keep]
    sc = ax.scatter(kept[:, 0], kept[:, 2], c=kept[:, 5], s=18,
                    vmin=vmax - job.threshold_db, vmax=vmax, cmap="plasma")
    plt.colorbar(sc, ax=ax, label="power (dB)")
    k = int(np.argmax(kept[:, 5]))
    ax.annotate(f"strongest {kept[k, 2]:.1f} deg",
                xy=(kept[k, 0], kept[k, 2]), xytext=(8, 8),
                textcoords="offset points", fontsize=9)
    return {"strongest_az_deg": float(kept[k, 2]),
            "strongest_time_s": float(kept[k, 0]),
            "n_points_shown": int(keep.sum())}


def _render_waveform(job: PlotJob, ax):
    samples, meta = _read_waveform(job.in_path)
    mag2 = np.abs(samples) ** 2
    peak = mag2.max()
    if peak == 0:
        raise SchemaError(f"{job.in_path}: all-zero waveform payload")
    t_us = np.arange(len(samples)) / meta["sample_rate_hz"] * 1e6
    norm_db = 10 * np.log10(np.maximum(mag2, 1e-300) / peak)
    ax.plot(t_us, norm_db, lw=0.7)
    papr_db = 10 * np.log10(peak / mag2.mean())
    ax.axhline(-papr_db, color="r", ls="--", lw=0.8)
    ax.annotate(f"PAPR {papr_db:.3f} dB", xy=(t_us[-1], -papr_db),
                xytext=(-80, 5), textcoords="offset points", fontsize=9)
    ax.set_xlabel("time (us)")
    ax.set_ylabel("normalized quadrature magnitude (dB)")
    ax.set_ylim(-max(3.0, 2 * papr_db), 0.5)
    ax.set_title(job.title or f"sounding waveform ({meta['phase_rule']})")
    ax.grid(alpha=0.3)
    return {"papr_db": float(papr_db), "n_samples": int(meta["n_samples"])}


def _render_ambiguity(job: PlotJob, ax):
    curves = {"": job.in_path}
    curves.update(job.extra_inputs)
    ann = {}
    for label, path in curves.items():
        data = _read_csv(path, ("doppler_hz", "magnitude"))
        if len(data) == 0:
            raise SchemaError(f"{path}: no ambiguity samples")
        ax.plot(data[:, 0], data[:, 1], lw=1.0,
                label=label or os.path.basename(path))
        # largest value away from the zero-Doppler mainlobe
        span = data[:, 0].max() - data[:, 0].min()
        off = np.abs(data[:, 0]) > 0.05 * span
        if np.any(off):
            k = np.argmax(np.where(off, data[:, 1], -np.inf))
            key = f"sidelobe_{label}" if label else "sidelobe"
            ann[key + "_hz"] = float(data[k, 0])
            ann[key + "_mag"] = float(data[k, 1])
            ax.plot([data[k, 0]], [data[k, 1]], "o", ms=5, mfc="none")
    ax.set_xlabel("Doppler (Hz)")
    ax.set_ylabel("normalized magnitude")
    ax.set_ylim(0, 1.05)
    ax.set_title(job.title or "switching-sequence Doppler ambiguity")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return ann


_RENDERERS = {
    "pdp": _render_pdp,
    "pas": _render_pas,
    "aoa_track": _render_aoa_track,
    "waveform": _render_waveform,
    "ambiguity": _render_ambiguity,
}


def render(job: PlotJob) -> dict:
    """Render one job to its output image; returns the drawn annotations."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2), dpi=130)
    try:
        annotations = _RENDERERS[job.kind](job, ax)
        fig.tight_layout()
        fig.savefig(job.out_path)
    finally:
        plt.close(fig)
    return {"out_path": job.out_path, "kind": job.kind,
            "annotations": annotations}
