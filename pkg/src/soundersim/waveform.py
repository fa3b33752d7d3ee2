"""Multitone sounding waveform generation and analysis.

The excitation is a comb of equally spaced tones with unit magnitude and
designed phases.  Quadratic (Zadoff-Chu style) phases give a chirp-like
envelope; an optional phase polish drives the oversampled peak-to-average
power ratio (PAPR) down to a few tenths of a dB so the transmit amplifier
can run near its compression point.
"""

from __future__ import annotations

from dataclasses import dataclass
import json

import numpy as np
from scipy.optimize import minimize

PHASE_RULES = ("papr_optimized", "zadoff_chu_quadratic", "explicit")


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


@dataclass(frozen=True)
class ToneGrid:
    """Comb of n_tones tones spaced tone_spacing_hz apart around a baseband center."""

    n_tones: int
    tone_spacing_hz: float = 5.0e5
    center_offset_hz: float = 0.0

    def __post_init__(self):
        if self.n_tones < 1:
            raise ValueError(f"n_tones must be >= 1, got {self.n_tones}")
        if not (self.tone_spacing_hz > 0):
            raise ValueError(f"tone_spacing_hz must be > 0, got {self.tone_spacing_hz}")
        # tones must land on the FFT bin grid
        ratio = self.center_offset_hz / self.tone_spacing_hz
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("center_offset_hz must be an integer multiple of tone_spacing_hz")

    @property
    def occupied_bandwidth_hz(self) -> float:
        return (self.n_tones - 1) * self.tone_spacing_hz

    @property
    def tone_indices(self) -> np.ndarray:
        """Signed bin indices of the tones relative to DC (center offset included)."""
        k0 = -(self.n_tones // 2) + int(round(self.center_offset_hz / self.tone_spacing_hz))
        return k0 + np.arange(self.n_tones)

    @property
    def tone_offsets_hz(self) -> np.ndarray:
        """Baseband frequency of each tone in Hz."""
        return self.tone_indices * self.tone_spacing_hz


@dataclass(frozen=True)
class SoundingWaveform:
    """One fundamental period of the tone comb plus its construction metadata."""

    samples: np.ndarray
    sample_rate_hz: float
    grid: ToneGrid
    phases: np.ndarray
    phase_rule: str = "explicit"

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    @property
    def nfft(self) -> int:
        return len(self.samples)

    def tone_bins(self) -> np.ndarray:
        """FFT bin index of each active tone for this waveform's length."""
        return self.grid.tone_indices % self.nfft

    def tone_values(self) -> np.ndarray:
        """Complex spectrum value on each active tone (unit magnitude by construction)."""
        return np.fft.fft(self.samples)[self.tone_bins()] / self.nfft


def quadratic_phases(n_tones: int, root: int = 1) -> np.ndarray:
    """Zadoff-Chu quadratic phases pi * root * n(n+1) / n_tones."""
    if np.gcd(root, n_tones) != 1:
        raise ValueError(f"root {root} must be coprime to n_tones {n_tones}")
    n = np.arange(n_tones)
    return np.pi * root * n * (n + 1) / n_tones


def _optimize_phases(grid: ToneGrid, nfft_base: int, init: np.ndarray,
                     p_stages=(8, 64, 256), maxiter=120, oversampling=8) -> np.ndarray:
    """Minimize oversampled envelope peakiness over the tone phases.

    Escalating p-norm surrogate of the peak power, solved with L-BFGS from the
    quadratic-phase start.  Deterministic: pure function of the inputs.
    """
    n_fft = nfft_base * oversampling
    idx = grid.tone_indices % n_fft
    c = grid.n_tones / n_fft**2  # mean |x|^2, fixed by Parseval

    def make_obj(p):
        def obj(theta):
            spec = np.zeros(n_fft, complex)
            spec[idx] = np.exp(1j * theta)
            x = np.fft.ifft(spec)
            y = np.abs(x) ** 2 / c
            f = np.mean(y**p)
            g = (2 * p / (n_fft * c)) * np.real(
                1j * np.exp(1j * theta) * np.fft.ifft(y ** (p - 1) * np.conj(x))[idx]
            )
            return f, g
        return obj

    theta = np.asarray(init, float).copy()
    for p in p_stages:
        res = minimize(make_obj(p), theta, jac=True, method="L-BFGS-B",
                       options={"maxiter": maxiter, "ftol": 1e-18, "gtol": 1e-16})
        theta = res.x
    return np.mod(theta, 2 * np.pi)


def gen_multitone(grid: ToneGrid, oversampling: int = 4,
                  phase_rule: str = "papr_optimized",
                  phases=None, root: int = 1) -> SoundingWaveform:
    """Generate one fundamental period of the multitone comb.

    Parameters
    ----------
    grid : ToneGrid
        Tone count, spacing and center offset.
    oversampling : int
        Sample rate multiplier on top of the power-of-two base FFT.
    phase_rule : str
        "papr_optimized" (quadratic start + envelope polish, default),
        "zadoff_chu_quadratic", or "explicit" with `phases` given.
    phases : sequence, optional
        Per-tone phases in radians for the explicit rule.
    root : int
        Zadoff-Chu root, coprime to the tone count.

    The sample rate is next_pow2(n_tones) * tone_spacing * oversampling and the
    returned samples span exactly one comb period, so every tone falls on an
    FFT bin and the spectrum is flat on the active tones by construction.
    """
    if oversampling < 1 or int(oversampling) != oversampling:
        raise ValueError(f"oversampling must be a positive integer, got {oversampling}")

    nfft_base = _next_pow2(grid.n_tones)
    nfft = nfft_base * int(oversampling)
    sample_rate = nfft * grid.tone_spacing_hz

    idx = grid.tone_indices
    if idx.min() < -(nfft // 2) or idx.max() > max((nfft + 1) // 2 - 1, 0):
        raise ValueError("tone comb exceeds the Nyquist band of the implied sample rate")

    if phases is not None:
        phase_rule = "explicit"
    if phase_rule == "explicit":
        if phases is None:
            raise ValueError("explicit phase rule requires a phase list")
        theta = np.asarray(phases, float)
        if theta.shape != (grid.n_tones,):
            raise ValueError(f"expected {grid.n_tones} phases, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("phases must be finite")
    elif phase_rule == "zadoff_chu_quadratic":
        theta = quadratic_phases(grid.n_tones, root)
    elif phase_rule == "papr_optimized":
        theta = quadratic_phases(grid.n_tones, root)
        if grid.n_tones > 2:
            theta = _optimize_phases(grid, nfft_base, theta)
    else:
        raise ValueError(f"unknown phase rule {phase_rule!r}")

    spec = np.zeros(nfft, complex)
    spec[grid.tone_indices % nfft] = np.exp(1j * theta)
    samples = np.fft.ifft(spec) * nfft
    samples.setflags(write=False)
    return SoundingWaveform(samples=samples, sample_rate_hz=sample_rate,
                            grid=grid, phases=theta, phase_rule=phase_rule)


def extend_cyclic(w: SoundingWaveform, total_duration_s: float) -> np.ndarray:
    """Cyclically extend one comb period to fill a longer sequence slot.

    Reproduces e.g. a 2.6 us slot from a 2.0 us fundamental period for timing
    purposes; the extension repeats samples from the period start.
    """
    n_total = int(round(total_duration_s * w.sample_rate_hz))
    if n_total < len(w.samples):
        raise ValueError("total duration is shorter than one waveform period")
    reps = int(np.ceil(n_total / len(w.samples)))
    return np.tile(w.samples, reps)[:n_total]


def papr_db(w: SoundingWaveform) -> float:
    """Peak-to-average power ratio 10*log10(max|x|^2 / mean|x|^2) in dB."""
    x = np.asarray(w.samples)
    if x.size == 0:
        raise ValueError("empty waveform")
    p = np.abs(x) ** 2
    mean = p.mean()
    if mean == 0:
        raise ValueError("all-zero waveform")
    return 10 * np.log10(p.max() / mean)


def spectrum_flatness_db(w: SoundingWaveform) -> float:
    """Max/min active-tone magnitude ratio in dB; 0 dB means exactly flat."""
    mags = np.abs(np.fft.fft(w.samples)[w.tone_bins()])
    lo = mags.min()
    if lo == 0:
        raise ValueError("an active tone has zero magnitude")
    return 20 * np.log10(mags.max() / lo)


def save_waveform(w: SoundingWaveform, bin_path, meta_path=None):
    """Write interleaved little-endian float32 (I, Q) pairs plus a JSON sidecar."""
    bin_path = str(bin_path)
    if meta_path is None:
        meta_path = bin_path.rsplit(".", 1)[0] + ".json"
    iq = np.empty(2 * len(w.samples), dtype="<f4")
    iq[0::2] = np.real(w.samples).astype("<f4")
    iq[1::2] = np.imag(w.samples).astype("<f4")
    with open(bin_path, "wb") as f:
        f.write(iq.tobytes())
    meta = {
        "n_tones": w.grid.n_tones,
        "tone_spacing_hz": w.grid.tone_spacing_hz,
        "center_offset_hz": w.grid.center_offset_hz,
        "sample_rate_hz": w.sample_rate_hz,
        "phase_rule": w.phase_rule,
        "n_samples": len(w.samples),
    }
    with open(str(meta_path), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return bin_path, str(meta_path)


def load_waveform(bin_path, meta_path=None) -> SoundingWaveform:
    """Read a waveform written by save_waveform (float32 precision)."""
    bin_path = str(bin_path)
    if meta_path is None:
        meta_path = bin_path.rsplit(".", 1)[0] + ".json"
    with open(str(meta_path)) as f:
        meta = json.load(f)
    iq = np.frombuffer(open(bin_path, "rb").read(), dtype="<f4")
    if iq.size != 2 * meta["n_samples"]:
        raise ValueError("payload size does not match the sidecar sample count")
    samples = iq[0::2].astype(float) + 1j * iq[1::2].astype(float)
    grid = ToneGrid(meta["n_tones"], meta["tone_spacing_hz"], meta.get("center_offset_hz", 0.0))
    phases = np.angle(np.fft.fft(samples)[grid.tone_indices % len(samples)])
    return SoundingWaveform(samples=samples, sample_rate_hz=meta["sample_rate_hz"],
                            grid=grid, phases=phases, phase_rule=meta["phase_rule"])
