"""Receive-chain simulation: acquisition, link budget, PDP and PAS.

Acquisition pipeline per schedule entry: realize the channel at the entry's
timestamp, add independent white noise per core replica, average the replicas,
divide by the known waveform spectrum on the active tones (frequency-domain
equalization), taper with a Hann window, and inverse-transform to the delay
domain.  The window is the half-shifted periodic Hann sin^2(pi (k+1/2) / M):
coherent gain exactly 1/2, delay-domain kernel confined to three taps.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import json

import numpy as np

from .arrays import Eadf
from .channel import (ChannelScene, dense_covariance, realize_snapshot,
                      realize_specular_entries, substream)
from .schedule import SwitchSchedule, NS_PER_S, schedule_checksum
from .waveform import SoundingWaveform

_ACQ_NOISE_STREAM = 0xACC0

CIR_SCHEMA = "cir-tensor/1"

THERMAL_NOISE_DBM_PER_HZ = -174.0


# ---------------------------------------------------------------------------
# link budget

@dataclass(frozen=True)
class LinkBudget:
    """Receiver and radiated-power figures for sensitivity arithmetic."""

    noise_figure_db: float = 5.0
    bandwidth_hz: float = 1.0e9
    eirp_dbm: float = 43.0
    rx_array_gain_db: float = 30.08
    saturation_dbm: float = -4.0

    def __post_init__(self):
        if not (self.bandwidth_hz > 0):
            raise ValueError("bandwidth must be positive")
        for v in (self.noise_figure_db, self.eirp_dbm, self.rx_array_gain_db,
                  self.saturation_dbm):
            if not np.isfinite(v):
                raise ValueError("budget fields must be finite")


def receiver_sensitivity(budget: LinkBudget) -> float:
    """Thermal floor plus noise figure over the bandwidth, in dBm."""
    return THERMAL_NOISE_DBM_PER_HZ + budget.noise_figure_db + 10 * np.log10(budget.bandwidth_hz)


def link_budget_report(budget: LinkBudget) -> dict:
    """Sensitivity, isotropic sensitivity, max pathloss, and dynamic range."""
    sens = receiver_sensitivity(budget)
    iso = sens - budget.rx_array_gain_db
    return {
        "sensitivity_dbm": sens,
        "isotropic_sensitivity_dbm": iso,
        "max_pathloss_db": budget.eirp_dbm - iso,
        "dynamic_range_db": budget.saturation_dbm - sens,
    }


# ---------------------------------------------------------------------------
# noise configuration

@dataclass(frozen=True)
class NoiseSpec:
    """Per-tone noise injection for acquire.

    mode "off": noiseless.  mode "snr": per-tone noise variance set so the
    mean tone SNR of the noiseless signal equals snr_db.  mode "noise_power":
    explicit per-tone variance.  mode "physical": SNR from the link budget,
    EIRP minus pathloss plus array gain against the band sensitivity.
    """

    mode: str = "off"
    snr_db: float = 30.0
    noise_power: float = 0.0
    budget: LinkBudget | None = None
    pathloss_db: float = 100.0
    lo_phase_jitter_rad: float = 0.0

    def __post_init__(self):
        if self.mode not in ("off", "snr", "noise_power", "physical"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.mode == "physical" and self.budget is None:
            raise ValueError("physical mode requires a link budget")
        if self.noise_power < 0 or self.lo_phase_jitter_rad < 0:
            raise ValueError("noise power and jitter must be nonnegative")


def hann_window(m: int) -> np.ndarray:
    """Half-shifted periodic Hann taper; never exactly zero, mean exactly 1/2."""
    return np.sin(np.pi * (np.arange(m) + 0.5) / m) ** 2


# ---------------------------------------------------------------------------
# CIR tensor

@dataclass
class CirTensor:
    """Acquired channel impulse responses h(s, tau, t, r) with metadata."""

    values: np.ndarray          # (n_snapshots, m_f, n_tx, n_rx) complex
    delay_step_s: float
    center_frequency_hz: float
    bandwidth_hz: float
    tone_spacing_hz: float
    averages: int
    window: str = "hann"
    schedule_checksum: str = ""
    noise_floor_per_tone: float = 0.0
    saturated: bool = False

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError("values must be (snapshot, delay, tx, rx)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("CIR values must be finite")

    @property
    def n_snapshots(self) -> int:
        return self.values.shape[0]

    @property
    def m_f(self) -> int:
        return self.values.shape[1]

    @property
    def delays_s(self) -> np.ndarray:
        return np.arange(self.m_f) * self.delay_step_s


def _noise_sigma2(noise: NoiseSpec, signal_power: float) -> float:
    """Per-tone complex noise variance implied by the configuration."""
    if noise.mode == "off":
        return 0.0
    if noise.mode == "noise_power":
        return noise.noise_power
    if noise.mode == "snr":
        return signal_power / 10 ** (noise.snr_db / 10)
    rx_dbm = (noise.budget.eirp_dbm - noise.pathloss_db + noise.budget.rx_array_gain_db)
    snr_db = rx_dbm - receiver_sensitivity(noise.budget)
    return signal_power / 10 ** (snr_db / 10)


def acquire(scene: ChannelScene, schedule: SwitchSchedule, waveform: SoundingWaveform,
            tx_eadf: Eadf, rx_eadf: Eadf, noise: NoiseSpec = NoiseSpec(),
            n_snapshots: int = 1, seed: int = 0, threads: int = 1) -> CirTensor:
    """Simulate acquisition of n_snapshots MIMO snapshots.

    Deterministic for a fixed seed regardless of threads: noise uses
    counter-based substreams indexed (snapshot, entry) and each entry writes
    its own tensor slot.
    """
    if waveform.grid.n_tones != scene.m_f:
        raise ValueError("waveform tone count does not match the scene tones")
    if abs(waveform.grid.tone_spacing_hz - scene.tone_spacing_hz) > 1e-6:
        raise ValueError("waveform tone spacing does not match the scene")
    cb = schedule.codebook
    if cb.tx.max() >= tx_eadf.n_elements or cb.rx.max() >= rx_eadf.n_elements:
        raise ValueError("schedule indexes elements outside the manifolds")

    m_f = scene.m_f
    m_avg = schedule.frame.n_core
    x_tone = waveform.tone_values()
    w = hann_window(m_f)
    sig_scale = np.mean(np.abs(x_tone) ** 2)

    dense_cov = None
    if scene.dense is not None and scene.dense.gamma1 > 0:
        dense_cov = dense_covariance(scene.dense, tx_eadf, rx_eadf, m_f,
                                     scene.tone_spacing_hz, scene.center_frequency_hz)

    # reference signal power for SNR-type noise modes: noiseless first snapshot
    t0 = schedule.timestamps_ns / NS_PER_S
    h0 = realize_specular_entries(scene, schedule, tx_eadf, rx_eadf, t0)
    p_sig = np.mean(np.abs(h0) ** 2) * sig_scale
    if p_sig == 0 and dense_cov is not None:
        p_sig = np.mean(np.abs(dense_cov.r_freq.diagonal())) * sig_scale
    sigma2 = _noise_sigma2(noise, p_sig if p_sig > 0 else 1.0)
    if not np.isfinite(sigma2):
        raise ValueError("noise configuration yields non-finite variance")

    saturated = False
    if noise.mode == "physical":
        rx_dbm = noise.budget.eirp_dbm - noise.pathloss_db + noise.budget.rx_array_gain_db
        saturated = rx_dbm > noise.budget.saturation_dbm

    values = np.zeros((n_snapshots, m_f, cb.n_tx, cb.n_rx), complex)

    def one_snapshot(s):
        h = realize_snapshot(scene, schedule, tx_eadf, rx_eadf, s, seed,
                             dense_cov=dense_cov)
        y = h * x_tone[None, :]
        if sigma2 > 0:
            rng = substream(seed, _ACQ_NOISE_STREAM, s)
            n = (rng.standard_normal((m_avg, len(cb), m_f))
                 + 1j * rng.standard_normal((m_avg, len(cb), m_f))) * np.sqrt(sigma2 / 2)
            y = y[None, :, :] + n
            y = y.mean(axis=0)
        if noise.lo_phase_jitter_rad > 0:
            rng = substream(seed, 0x10BE, s)
            y = y * np.exp(1j * rng.uniform(-noise.lo_phase_jitter_rad,
                                            noise.lo_phase_jitter_rad))
        h_eq = y / x_tone[None, :]
        cir = np.fft.ifft(h_eq * w[None, :], axis=1)
        values[s, :, cb.tx, cb.rx] = cir

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one_snapshot, range(n_snapshots)))
    else:
        for s in range(n_snapshots):
            one_snapshot(s)

    bandwidth = m_f * scene.tone_spacing_hz
    return CirTensor(values=values, delay_step_s=1.0 / bandwidth,
                     center_frequency_hz=scene.center_frequency_hz,
                     bandwidth_hz=bandwidth, tone_spacing_hz=scene.tone_spacing_hz,
                     averages=m_avg, window="hann",
                     schedule_checksum=schedule_checksum(schedule),
                     noise_floor_per_tone=sigma2 / m_avg, saturated=saturated)


# ---------------------------------------------------------------------------
# power profiles

def pdp(cir: CirTensor, snapshots=None, tx=None, rx=None,
        average: bool = True) -> np.ndarray:
    """Power delay profile |h|^2, averaged over the selected axes.

    snapshots / tx / rx select index subsets (default all); with average=False
    the (s, tau, t, r) selection is returned squared but unreduced.
    """
    sel = cir.values
    sel = sel[list(snapshots) if snapshots is not None else slice(None)]
    sel = sel[:, :, list(tx) if tx is not None else slice(None)]
    sel = sel[:, :, :, list(rx) if rx is not None else slice(None)]
    if sel.size == 0:
        raise ValueError("empty selection")
    p = np.abs(sel) ** 2
    if not average:
        return p
    return p.mean(axis=(0, 2, 3))


def pas(cir: CirTensor, rx_eadf: Eadf, az_grid_rad: np.ndarray,
        el_grid_rad: np.ndarray, snapshots=None) -> np.ndarray:
    """Beamforming power angular spectrum over the receive array.

    Matched-filter power per (az, el) cell, polarizations aggregated, summed
    over delay bins, transmit elements and the selected snapshots, normalized
    to its maximum.  Returns shape (n_az, n_el).
    """
    az = np.atleast_1d(az_grid_rad)
    el = np.atleast_1d(el_grid_rad)
    if az.size == 0 or el.size == 0:
        raise ValueError("empty angle grid")
    if cir.values.shape[3] != rx_eadf.n_elements:
        raise ValueError("CIR receive dimension does not match the manifold")
    h = cir.values[list(snapshots) if snapshots is not None else slice(None)]
    b = rx_eadf.response_grid(az, el, cir.center_frequency_hz)  # (MR, 2, naz, nel)
    norm = np.sum(np.abs(b) ** 2, axis=0)                        # (2, naz, nel)
    out = np.zeros((az.size, el.size))
    for p in range(2):
        z = np.einsum("rae,smtr->smtae", np.conj(b[:, p]), h, optimize=True)
        np_norm = np.maximum(norm[p], 1e-300)
        out += (np.abs(z) ** 2).sum(axis=(0, 1, 2)) / np_norm
    peak = out.max()
    if peak > 0:
        out = out / peak
    return out


# ---------------------------------------------------------------------------
# file formats

def save_cir(cir: CirTensor, bin_path, meta_path=None):
    """JSON header plus little-endian float32 I/Q payload in C-order [s][t][r][tau]."""
    bin_path = str(bin_path)
    if meta_path is None:
        meta_path = bin_path.rsplit(".", 1)[0] + ".json"
    s, m, t, r = cir.values.shape
    payload = np.transpose(cir.values, (0, 2, 3, 1)).astype(np.complex64)
    iq = np.empty(payload.size * 2, dtype="<f4")
    iq[0::2] = payload.real.ravel()
    iq[1::2] = payload.imag.ravel()
    with open(bin_path, "wb") as f:
        f.write(iq.tobytes())
    header = {
        "schema": CIR_SCHEMA,
        "dims": {"snapshots": s, "tx": t, "rx": r, "delay": m},
        "delay_step_s": cir.delay_step_s,
        "center_frequency_hz": cir.center_frequency_hz,
        "bandwidth_hz": cir.bandwidth_hz,
        "tone_spacing_hz": cir.tone_spacing_hz,
        "averages": cir.averages,
        "window": cir.window,
        "schedule_checksum": cir.schedule_checksum,
        "noise_floor_per_tone": cir.noise_floor_per_tone,
        "saturated": cir.saturated,
    }
    with open(str(meta_path), "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    return bin_path, str(meta_path)


def load_cir(bin_path, meta_path=None) -> CirTensor:
    bin_path = str(bin_path)
    if meta_path is None:
        meta_path = bin_path.rsplit(".", 1)[0] + ".json"
    with open(str(meta_path)) as f:
        hd = json.load(f)
    if hd.get("schema") != CIR_SCHEMA:
        raise ValueError(f"unsupported CIR schema {hd.get('schema')!r}")
    d = hd["dims"]
    iq = np.frombuffer(open(bin_path, "rb").read(), dtype="<f4")
    expected = 2 * d["snapshots"] * d["tx"] * d["rx"] * d["delay"]
    if iq.size != expected:
        raise ValueError("CIR payload size does not match the header dims")
    vals = (iq[0::2] + 1j * iq[1::2]).reshape(d["snapshots"], d["tx"], d["rx"], d["delay"])
    vals = np.transpose(vals, (0, 3, 1, 2)).astype(complex)
    return CirTensor(values=vals, delay_step_s=hd["delay_step_s"],
                     center_frequency_hz=hd["center_frequency_hz"],
                     bandwidth_hz=hd["bandwidth_hz"],
                     tone_spacing_hz=hd["tone_spacing_hz"], averages=hd["averages"],
                     window=hd["window"], schedule_checksum=hd["schedule_checksum"],
                     noise_floor_per_tone=hd.get("noise_floor_per_tone", 0.0),
                     saturated=hd.get("saturated", False))


def pdp_to_csv(cir: CirTensor, path, **selection) -> str:
    """Two-column CSV: delay_ns, power_db (averaged profile)."""
    prof = pdp(cir, **selection)
    delays = cir.delays_s * 1e9
    with open(str(path), "w") as f:
        f.write("delay_ns,power_db\n")
        for d, p in zip(delays, prof):
            f.write(f"{d:.6f},{10 * np.log10(max(p, 1e-300)):.6f}\n")
    return str(path)


def pas_to_csv(spectrum: np.ndarray, az_grid_rad, el_grid_rad, path) -> str:
    """Long-format CSV: az_deg, el_deg, power_db (normalized to 0 dB peak)."""
    az = np.rad2deg(np.atleast_1d(az_grid_rad))
    el = np.rad2deg(np.atleast_1d(el_grid_rad))
    with open(str(path), "w") as f:
        f.write("az_deg,el_deg,power_db\n")
        for i, a in enumerate(az):
            for j, e in enumerate(el):
                f.write(f"{a:.4f},{e:.4f},"
                        f"{10 * np.log10(max(spectrum[i, j], 1e-300)):.6f}\n")
    return str(path)
