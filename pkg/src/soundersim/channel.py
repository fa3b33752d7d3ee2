"""Time-variant double-directional channel synthesis.

Specular paths follow the plane-wave model: per transmit/receive combination
the transfer value is (rx manifold)^T . (2x2 polarimetric gain) . (tx manifold)
times exp(-j 2 pi f tau), with phase evolving at each schedule entry's own
timestamp -- the part that makes switched-array Doppler physics real.  Dense
(diffuse) multipath is a zero-mean circular Gaussian with a Kronecker
covariance: receive-angular x transmit-angular x frequency, the angular factors
shaped by von Mises densities and the frequency factor by a Toeplitz matrix
built from a sampled one-sided exponential power spectral density.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json

import numpy as np
from scipy.linalg import toeplitz

from .arrays import C0, Eadf
from .schedule import SwitchSchedule, NS_PER_S

# Philox stream tags: independent substreams per consumer
_DENSE_STREAM = 0xD1F0
_NOISE_STREAM = 0x401E

SCENE_SCHEMA = "channel-scene/1"


def substream(seed: int, stream: int, *counter) -> np.random.Generator:
    """Counter-based Philox substream; parallel and serial draws identical."""
    ctr = np.zeros(4, np.uint64)
    for i, c in enumerate(counter):
        ctr[i + 1] = np.uint64(c)
    return np.random.Generator(np.random.Philox(key=[seed, stream], counter=ctr))


@dataclass
class SpecularPath:
    """One plane-wave multipath component.

    gain is the 2x2 complex polarimetric matrix indexed [rx_pol, tx_pol] with
    pol 0 = H, 1 = V.  doppler_hz is an explicit model extension: the phase
    advances as exp(+j 2 pi doppler t) at each entry timestamp.
    """

    delay_s: float
    aoa_az_rad: float
    aoa_el_rad: float
    aod_az_rad: float
    aod_el_rad: float
    gain: np.ndarray
    doppler_hz: float = 0.0

    def __post_init__(self):
        self.gain = np.asarray(self.gain, complex).reshape(2, 2)
        if self.delay_s < 0:
            raise ValueError("delay must be nonnegative")
        if not np.all(np.isfinite(self.gain)):
            raise ValueError("gain must be finite")

    @classmethod
    def co_pol(cls, delay_s, aoa_az_rad, aod_az_rad, gain=1.0,
               aoa_el_rad=0.0, aod_el_rad=0.0, doppler_hz=0.0) -> "SpecularPath":
        g = np.zeros((2, 2), complex)
        g[0, 0] = gain
        return cls(delay_s, aoa_az_rad, aoa_el_rad, aod_az_rad, aod_el_rad,
                   g, doppler_hz)

    @property
    def power_db(self) -> float:
        return 10 * np.log10(np.sum(np.abs(self.gain) ** 2))


@dataclass
class AngularSpread:
    """von Mises dense-multipath angular density parameters for one link end."""

    mu_az_rad: float = 0.0
    mu_el_rad: float = 0.0
    kappa_az: float = 0.0
    kappa_el: float = 0.0
    amp_az: float = 1.0
    amp_el: float = 1.0

    def __post_init__(self):
        if self.kappa_az < 0 or self.kappa_el < 0:
            raise ValueError("concentration must be nonnegative")


@dataclass
class DenseProfile:
    """Dense-multipath model: frequency profile, angular spreads, noise power.

    tau_d_s is the onset delay of the one-sided exponential delay-power
    profile, beta_d its dimensionless decay per delay bin, gamma1 the power of
    the first time-domain component.
    """

    tau_d_s: float = 0.0
    beta_d: float = 0.05
    gamma1: float = 0.0
    rx_spread: AngularSpread = field(default_factory=AngularSpread)
    tx_spread: AngularSpread = field(default_factory=AngularSpread)
    noise_var: float = 0.0

    def __post_init__(self):
        if self.beta_d <= 0:
            raise ValueError("beta_d must be positive")
        if self.gamma1 < 0 or self.noise_var < 0:
            raise ValueError("powers must be nonnegative")


@dataclass
class Motion:
    """Constant-speed receiver trajectory over piecewise-linear waypoints.

    Paths are pinned to virtual sources at scatterer_range_m along their
    initial arrival direction; angles, delays, and Doppler then follow from
    the moving geometry exactly.
    """

    waypoints: np.ndarray       # (k, 3) positions in m
    speed_mps: float
    scatterer_range_m: float = 10.0

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, float))
        if self.waypoints.shape[1] != 3 or len(self.waypoints) < 2:
            raise ValueError("need at least two 3-D waypoints")
        if self.speed_mps < 0 or self.scatterer_range_m <= 0:
            raise ValueError("speed must be >= 0 and scatterer range positive")

    def position(self, t_s: np.ndarray) -> np.ndarray:
        """Interpolated position(s) at time(s) t_s, clamped at the last waypoint."""
        t_s = np.atleast_1d(np.asarray(t_s, float))
        seg = np.diff(self.waypoints, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        dist = np.clip(self.speed_mps * t_s, 0.0, cum[-1])
        idx = np.clip(np.searchsorted(cum, dist, side="right") - 1, 0, len(seg) - 1)
        frac = np.where(seg_len[idx] > 0, (dist - cum[idx]) / np.maximum(seg_len[idx], 1e-300), 0.0)
        return self.waypoints[idx] + frac[:, None] * seg[idx]


@dataclass
class ChannelScene:
    """Specular path list, dense profile, optional motion, and sounding tones."""

    frequencies_hz: np.ndarray
    paths: list = field(default_factory=list)
    dense: DenseProfile | None = None
    motion: Motion | None = None

    def __post_init__(self):
        self.frequencies_hz = np.asarray(self.frequencies_hz, float)
        if self.frequencies_hz.size < 1:
            raise ValueError("at least one sounding frequency is required")
        if not self.paths and self.dense is None:
            raise ValueError("scene needs paths or a dense profile")

    @property
    def m_f(self) -> int:
        return self.frequencies_hz.size

    @property
    def center_frequency_hz(self) -> float:
        return float(self.frequencies_hz.mean())

    @property
    def tone_spacing_hz(self) -> float:
        if self.m_f == 1:
            return 0.0
        return float(np.diff(self.frequencies_hz).mean())


# ---------------------------------------------------------------------------
# specular synthesis

def _pair_gains(path: SpecularPath, tx_eadf: Eadf, rx_eadf: Eadf,
                frequency_hz: float) -> np.ndarray:
    """b_R^T Gamma b_T for all combinations, shape (n_tx, n_rx)."""
    b_r = rx_eadf.response(path.aoa_az_rad, path.aoa_el_rad, frequency_hz)  # (MR, 2)
    b_t = tx_eadf.response(path.aod_az_rad, path.aod_el_rad, frequency_hz)  # (MT, 2)
    return np.einsum("tq,pq,rp->tr", b_t, path.gain, b_r)


def specular_response(paths, tx_eadf: Eadf, rx_eadf: Eadf,
                      frequencies_hz, time_s: float = 0.0,
                      manifold_frequency_hz=None) -> np.ndarray:
    """Sum-of-paths transfer values on the full grid, shape (n_tx, n_rx, n_freq).

    All combinations are evaluated at the single instant time_s, as if sampled
    simultaneously; per-entry timing is handled by realize_snapshot.  Manifolds
    are read at the calibration point nearest the band center (pattern
    frequency dependence across the sounding band is neglected).
    """
    freqs = np.asarray(frequencies_hz, float)
    if manifold_frequency_hz is None:
        manifold_frequency_hz = float(freqs.mean())
    out = np.zeros((tx_eadf.n_elements, rx_eadf.n_elements, freqs.size), complex)
    for path in paths:
        g = _pair_gains(path, tx_eadf, rx_eadf, manifold_frequency_hz)
        phase = np.exp(-2j * np.pi * freqs * path.delay_s
                       + 2j * np.pi * path.doppler_hz * time_s)
        out += g[:, :, None] * phase[None, None, :]
    return out


def _motion_path_states(scene: ChannelScene, path: SpecularPath,
                        times_s: np.ndarray):
    """Per-time (aoa_az, aoa_el, delay, extra geometric phase rate) under motion."""
    mot = scene.motion
    p0 = mot.position(np.zeros(1))[0]
    k0 = np.array([np.cos(path.aoa_el_rad) * np.cos(path.aoa_az_rad),
                   np.cos(path.aoa_el_rad) * np.sin(path.aoa_az_rad),
                   np.sin(path.aoa_el_rad)])
    src = p0 + mot.scatterer_range_m * k0
    pos = mot.position(times_s)
    rel = src[None, :] - pos
    rng = np.linalg.norm(rel, axis=1)
    k = rel / rng[:, None]
    az = np.arctan2(k[:, 1], k[:, 0])
    el = np.arcsin(np.clip(k[:, 2], -1, 1))
    delay = path.delay_s + (rng - mot.scatterer_range_m) / C0
    return az, el, delay


def realize_specular_entries(scene: ChannelScene, schedule: SwitchSchedule,
                             tx_eadf: Eadf, rx_eadf: Eadf,
                             times_s: np.ndarray) -> np.ndarray:
    """Noise-free specular transfer per schedule entry, shape (n_entries, m_f).

    times_s are absolute per-entry times (snapshot offset included); each entry
    sees the channel at its own switch instant.
    """
    freqs = scene.frequencies_hz
    fc = scene.center_frequency_hz
    cb = schedule.codebook
    n_e = len(cb)
    out = np.zeros((n_e, freqs.size), complex)
    for path in scene.paths:
        dop = np.exp(2j * np.pi * path.doppler_hz * times_s)
        if scene.motion is not None:
            az, el, delay = _motion_path_states(scene, path, times_s)
            b_r = rx_eadf.response(az, el, fc)                  # (MR, 2, n_e)
            b_t = tx_eadf.response(path.aod_az_rad, path.aod_el_rad, fc)
            amp = np.einsum("tq,pq,pe->te", b_t, path.gain,
                            b_r[cb.rx, :, np.arange(n_e)].T)
            amp = amp[cb.tx, np.arange(n_e)]
            phase = np.exp(-2j * np.pi * np.outer(delay, freqs))
            out += (amp * dop)[:, None] * phase
        else:
            g = _pair_gains(path, tx_eadf, rx_eadf, fc)         # (MT, MR)
            amp = g[cb.tx, cb.rx]
            phase = np.exp(-2j * np.pi * freqs * path.delay_s)
            out += (amp * dop)[:, None] * phase[None, :]
    return out


# ---------------------------------------------------------------------------
# dense multipath model

def freq_psd(tau_d_s: float, beta_d: float, gamma1: float, m_f: int,
             tone_spacing_hz: float) -> np.ndarray:
    """Sampled frequency-domain PSD of the dense process, length m_f.

    Entry k is (gamma1 / m_f) * exp(-j 2 pi k tau_norm) / (beta_d + j 2 pi k / m_f)
    with tau_norm = tau_d_s * tone_spacing_hz, i.e. the onset delay as a
    fraction of the unambiguous delay window 1 / tone_spacing.  Its inverse DFT
    (times m_f) is a one-sided exponential delay-power profile of height gamma1
    starting at delay bin tau_d_s * bandwidth.
    """
    if beta_d <= 0:
        raise ValueError("beta_d must be positive")
    k = np.arange(m_f)
    tau_norm = tau_d_s * tone_spacing_hz
    return (gamma1 / m_f) * np.exp(-2j * np.pi * k * tau_norm) / (beta_d + 2j * np.pi * k / m_f)


def delay_power_profile(lam: np.ndarray) -> np.ndarray:
    """Delay-domain power profile implied by the sampled PSD vector.

    lam holds the nonnegative-lag tone autocorrelation, so the profile is the
    Hermitian-symmetrized inverse transform (Wiener-Khinchin); for the
    one-sided exponential model this is gamma1 * exp(-beta_d (m - m0)) on the
    decaying segment.
    """
    lam = np.asarray(lam)
    m_f = lam.size
    p = np.fft.ifft(lam) * m_f
    return 2 * p.real - lam[0].real


def von_mises_density(theta: np.ndarray, mu: float, kappa: float) -> np.ndarray:
    """Circular normal density; kappa = 0 degenerates to the uniform density."""
    return np.exp(kappa * np.cos(theta - mu)) / (2 * np.pi * np.i0(kappa))


def _angular_factor(eadf: Eadf, spread: AngularSpread, frequency_hz,
                    az_step_deg=5.0, el_step_deg=10.0) -> np.ndarray:
    """R = B Delta B^H over a quadrature grid, trace-normalized, amp-scaled."""
    az = np.deg2rad(np.arange(-180.0, 180.0, az_step_deg))
    el = np.deg2rad(np.arange(-85.0, 85.0 + 1e-9, el_step_deg))
    b = eadf.response_grid(az, el, frequency_hz)       # (M, 2, naz, nel)
    w = (von_mises_density(az[:, None], spread.mu_az_rad, spread.kappa_az)
         * von_mises_density(el[None, :], spread.mu_el_rad, spread.kappa_el)
         * np.cos(el)[None, :])
    r = np.einsum("pqae,ae,rqae->pr", b, w, np.conj(b), optimize=True)
    m = len(r)
    tr = np.trace(r).real
    if tr <= 0:
        raise ValueError("angular covariance factor has nonpositive trace")
    return spread.amp_az * spread.amp_el * (m / tr) * r


class DenseCovariance:
    """Kronecker-structured covariance R_rx (x) R_tx (x) R_freq.

    Exposes matrix-vector products and factorized sampling without ever
    materializing the full matrix; sampling uses the eigen square roots of the
    three factors (negative eigenvalues are clipped and counted).
    """

    def __init__(self, r_rx: np.ndarray, r_tx: np.ndarray, r_freq: np.ndarray,
                 eig_clip: float = 1e-10):
        self.r_rx = np.asarray(r_rx)
        self.r_tx = np.asarray(r_tx)
        self.r_freq = np.asarray(r_freq)
        self.clipped_eigenvalues = 0
        self._roots = []
        self._eigs = []
        for r in (self.r_rx, self.r_tx, self.r_freq):
            vals, vecs = np.linalg.eigh(r)
            tol = eig_clip * max(vals.max(), 0.0) * len(vals)
            if vals.min() < -tol:
                raise ValueError("covariance factor is not positive semidefinite")
            self.clipped_eigenvalues += int(np.sum(vals < 0))
            vals = np.clip(vals, 0.0, None)
            self._eigs.append(vals)
            self._roots.append(vecs * np.sqrt(vals)[None, :])

    @property
    def shape(self):
        n = len(self.r_rx) * len(self.r_tx) * len(self.r_freq)
        return (n, n)

    def eigenvalues(self) -> np.ndarray:
        """All Kronecker eigenvalues (products of factor eigenvalues), sorted."""
        e = np.einsum("r,t,f->rtf", *self._eigs).ravel()
        return np.sort(e)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """R @ v for v of length M_R * M_T * M_f (r slowest, f fastest)."""
        x = v.reshape(len(self.r_rx), len(self.r_tx), len(self.r_freq))
        x = np.einsum("ab,btf->atf", self.r_rx, x)
        x = np.einsum("cd,adf->acf", self.r_tx, x)
        x = np.einsum("gf,acf->acg", self.r_freq, x)
        return x.ravel()

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """Draw n realizations, shape (n, M_R, M_T, M_f)."""
        mr, mt, mf = len(self.r_rx), len(self.r_tx), len(self.r_freq)
        z = (rng.standard_normal((n, mr, mt, mf)) +
             1j * rng.standard_normal((n, mr, mt, mf))) / np.sqrt(2)
        lr, lt, lf = self._roots
        z = np.einsum("ab,nbtf->natf", lr, z)
        z = np.einsum("cd,nrdf->nrcf", lt, z)
        z = np.einsum("ef,nrtf->nrte", lf, z)
        return z


def dense_covariance(dense: DenseProfile, tx_eadf: Eadf, rx_eadf: Eadf,
                     m_f: int, tone_spacing_hz: float,
                     manifold_frequency_hz=None) -> DenseCovariance:
    """Build the implicit Kronecker covariance for a dense profile.

    The frequency factor is Toeplitz from the sampled PSD and carries the
    gamma1 power scale; the angular factors are trace-normalized so array size
    does not change the per-sample dense power.
    """
    lam = freq_psd(dense.tau_d_s, dense.beta_d, dense.gamma1, m_f, tone_spacing_hz)
    r_f = toeplitz(lam, np.conj(lam))
    r_r = _angular_factor(rx_eadf, dense.rx_spread, manifold_frequency_hz)
    r_t = _angular_factor(tx_eadf, dense.tx_spread, manifold_frequency_hz)
    return DenseCovariance(r_r, r_t, r_f)


# ---------------------------------------------------------------------------
# snapshot realization

def realize_snapshot(scene: ChannelScene, schedule: SwitchSchedule,
                     tx_eadf: Eadf, rx_eadf: Eadf, snapshot_index: int,
                     seed: int = 0,
                     dense_cov: DenseCovariance | None = None) -> np.ndarray:
    """One MIMO snapshot of per-entry transfer vectors, shape (n_entries, m_f).

    The specular part is evaluated at each entry's own timestamp; the dense
    part is one correlated Gaussian realization for the whole snapshot; white
    noise of variance dense.noise_var is added per sample.  Deterministic for
    fixed (seed, snapshot_index) via counter-based substreams.
    """
    t_abs = (schedule.timestamps_ns / NS_PER_S
             + snapshot_index * schedule.snapshot_duration_s)
    h = realize_specular_entries(scene, schedule, tx_eadf, rx_eadf, t_abs)

    if scene.dense is not None and scene.dense.gamma1 > 0:
        if dense_cov is None:
            dense_cov = dense_covariance(scene.dense, tx_eadf, rx_eadf,
                                         scene.m_f, scene.tone_spacing_hz,
                                         scene.center_frequency_hz)
        rng = substream(seed, _DENSE_STREAM, snapshot_index)
        d = dense_cov.sample(rng, 1)[0]          # (MR, MT, Mf)
        cb = schedule.codebook
        h = h + d[cb.rx, cb.tx, :]

    if scene.dense is not None and scene.dense.noise_var > 0:
        rng = substream(seed, _NOISE_STREAM, snapshot_index)
        sigma = np.sqrt(scene.dense.noise_var / 2)
        h = h + sigma * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    return h


# ---------------------------------------------------------------------------
# scene files

def scene_to_json(scene: ChannelScene, path=None):
    doc = {
        "schema": SCENE_SCHEMA,
        "frequencies_hz": {
            "start": float(scene.frequencies_hz[0]),
            "step": scene.tone_spacing_hz,
            "count": scene.m_f,
        },
        "paths": [
            {
                "delay_ns": p.delay_s * 1e9,
                "aoa_az_deg": np.rad2deg(p.aoa_az_rad),
                "aoa_el_deg": np.rad2deg(p.aoa_el_rad),
                "aod_az_deg": np.rad2deg(p.aod_az_rad),
                "aod_el_deg": np.rad2deg(p.aod_el_rad),
                "gain": [[[float(v.real), float(v.imag)] for v in row] for row in p.gain],
                "doppler_hz": p.doppler_hz,
            }
            for p in scene.paths
        ],
    }
    if scene.dense is not None:
        d = scene.dense
        doc["dense"] = {
            "tau_d_ns": d.tau_d_s * 1e9, "beta_d": d.beta_d, "gamma1": d.gamma1,
            "noise_var": d.noise_var,
            "rx_spread": vars(d.rx_spread).copy(),
            "tx_spread": vars(d.tx_spread).copy(),
        }
    if scene.motion is not None:
        doc["motion"] = {
            "waypoints": scene.motion.waypoints.tolist(),
            "speed_mps": scene.motion.speed_mps,
            "scatterer_range_m": scene.motion.scatterer_range_m,
        }
    if path is not None:
        with open(str(path), "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
    return doc


def scene_from_json(doc_or_path) -> ChannelScene:
    if isinstance(doc_or_path, (str, bytes)) or hasattr(doc_or_path, "__fspath__"):
        with open(str(doc_or_path)) as f:
            doc = json.load(f)
    else:
        doc = doc_or_path
    if doc.get("schema") != SCENE_SCHEMA:
        raise ValueError(f"unsupported scene schema {doc.get('schema')!r}")
    fr = doc["frequencies_hz"]
    freqs = fr["start"] + fr["step"] * np.arange(fr["count"])
    paths = [
        SpecularPath(
            delay_s=p["delay_ns"] * 1e-9,
            aoa_az_rad=np.deg2rad(p["aoa_az_deg"]),
            aoa_el_rad=np.deg2rad(p["aoa_el_deg"]),
            aod_az_rad=np.deg2rad(p["aod_az_deg"]),
            aod_el_rad=np.deg2rad(p["aod_el_deg"]),
            gain=np.array([[complex(a, b) for a, b in row] for row in p["gain"]]),
            doppler_hz=p.get("doppler_hz", 0.0),
        )
        for p in doc.get("paths", [])
    ]
    dense = None
    if "dense" in doc:
        d = doc["dense"]
        dense = DenseProfile(tau_d_s=d["tau_d_ns"] * 1e-9, beta_d=d["beta_d"],
                             gamma1=d["gamma1"], noise_var=d.get("noise_var", 0.0),
                             rx_spread=AngularSpread(**d.get("rx_spread", {})),
                             tx_spread=AngularSpread(**d.get("tx_spread", {})))
    motion = None
    if "motion" in doc:
        m = doc["motion"]
        motion = Motion(waypoints=np.array(m["waypoints"]), speed_mps=m["speed_mps"],
                        scatterer_range_m=m.get("scatterer_range_m", 10.0))
    return ChannelScene(frequencies_hz=freqs, paths=paths, dense=dense, motion=motion)
