"""Array geometry, element patterns, and EADF manifold evaluation.

Per-element dual-polarized complex patterns live on a regular azimuth/elevation
grid.  A 2-D Fourier transform over the periodically extended sphere cut
(effective aperture distribution function) compresses each pattern and gives a
smooth trigonometric interpolant -- the array manifold -- that can be evaluated,
with analytic angle derivatives, at arbitrary angles.

Conventions: azimuth in [-pi, pi) measured from +x in the x-y plane, elevation
in [-pi/2, pi/2] from the x-y plane toward +z.  Direction unit vector
u = (cos el cos az, cos el sin az, sin el) points from the array toward the
source; element phase is exp(+j 2 pi f / c * (position . u)).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import hashlib
import json
import os

import numpy as np

C0 = 299_792_458.0

ISOTROPIC_HPBW_DEG = 180.0   # sentinel: constant gain over the sphere

CALIBRATION_SCHEMA = "pattern-calibration/1"


# ---------------------------------------------------------------------------
# geometry

@dataclass(frozen=True)
class ArrayGeometry:
    """Element positions (m) and broadside orientations (unit vectors)."""

    positions: np.ndarray      # (n, 3)
    orientations: np.ndarray   # (n, 3)
    layout: str = "custom"

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.positions, float))
        o = np.atleast_2d(np.asarray(self.orientations, float))
        if p.shape != o.shape or p.shape[1] != 3:
            raise ValueError("positions and orientations must both be (n, 3)")
        norms = np.linalg.norm(o, axis=1)
        if np.any(np.abs(norms - 1) > 1e-6):
            raise ValueError("orientations must be unit vectors")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "orientations", o)

    @property
    def n_elements(self) -> int:
        return len(self.positions)

    @classmethod
    def single(cls) -> "ArrayGeometry":
        return cls(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]), layout="single")

    @classmethod
    def upa(cls, n_y: int, n_z: int, spacing_m: float, dual_feed: bool = False) -> "ArrayGeometry":
        """Uniform planar array in the y-z plane, broadside +x."""
        ys = (np.arange(n_y) - (n_y - 1) / 2) * spacing_m
        zs = (np.arange(n_z) - (n_z - 1) / 2) * spacing_m
        pos = np.array([(0.0, y, z) for z in zs for y in ys])
        if dual_feed:
            pos = np.repeat(pos, 2, axis=0)
        ori = np.tile([1.0, 0.0, 0.0], (len(pos), 1))
        return cls(pos, ori, layout="upa_panel")

    @classmethod
    def panel_rectangle(cls, n_panels: int = 4, panel_n: int = 4,
                        spacing_m: float = C0 / 28e9 / 2) -> "ArrayGeometry":
        """Transmit-style rectangle of dual-feed panel_n x panel_n patch panels."""
        cols = int(np.ceil(np.sqrt(n_panels)))
        rows = int(np.ceil(n_panels / cols))
        panel_w = panel_n * spacing_m
        pos = []
        for p in range(n_panels):
            r, c = divmod(p, cols)
            cy = (c - (cols - 1) / 2) * panel_w
            cz = (r - (rows - 1) / 2) * panel_w
            for z in range(panel_n):
                for y in range(panel_n):
                    py = cy + (y - (panel_n - 1) / 2) * spacing_m
                    pz = cz + (z - (panel_n - 1) / 2) * spacing_m
                    pos.append((0.0, py, pz))
                    pos.append((0.0, py, pz))   # second feed, same patch
        pos = np.array(pos)
        ori = np.tile([1.0, 0.0, 0.0], (len(pos), 1))
        return cls(pos, ori, layout="upa_panel")

    @classmethod
    def octagon(cls, n_panels: int = 8, panel_n: int = 4,
                spacing_m: float = C0 / 28e9 / 2) -> "ArrayGeometry":
        """Receive-style octagon of outward-facing dual-feed patch panels."""
        panel_w = panel_n * spacing_m
        radius = panel_w / (2 * np.tan(np.pi / n_panels))
        pos, ori = [], []
        for p in range(n_panels):
            yaw = 2 * np.pi * p / n_panels
            nvec = np.array([np.cos(yaw), np.sin(yaw), 0.0])
            tvec = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
            for z in range(panel_n):
                for y in range(panel_n):
                    off = (y - (panel_n - 1) / 2) * spacing_m * tvec
                    off = off + np.array([0, 0, (z - (panel_n - 1) / 2) * spacing_m])
                    for _feed in range(2):
                        pos.append(radius * nvec + off)
                        ori.append(nvec)
        return cls(np.array(pos), np.array(ori), layout="octagon")


# ---------------------------------------------------------------------------
# pattern grids

@dataclass(frozen=True)
class PatternGrid:
    """Complex element patterns on a regular (az, el) grid.

    gains is indexed [element, polarization (0=H, 1=V), frequency, az, el]
    with linear amplitude and phase embedded.
    """

    az_start_deg: float
    az_step_deg: float
    n_az: int
    el_start_deg: float
    el_step_deg: float
    n_el: int
    frequencies_hz: tuple
    gains: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gains)
        expected = (g.shape[0], 2, len(self.frequencies_hz), self.n_az, self.n_el)
        if g.shape != expected:
            raise ValueError(f"gains shape {g.shape} != {expected}")
        if not np.all(np.isfinite(g)):
            raise ValueError("pattern gains must be finite")
        if self.az_step_deg <= 0 or self.el_step_deg <= 0:
            raise ValueError("grid steps must be positive")
        span = self.az_step_deg * self.n_az
        if abs(span - 360.0) > 1e-9:
            raise ValueError("azimuth grid must cover the full circle [start, start+360)")
        # az + 180 deg must be a grid shift for the elevation extension
        if self.n_az % 2 != 0:
            raise ValueError("azimuth point count must be even")

    @property
    def n_elements(self) -> int:
        return self.gains.shape[0]

    @property
    def az_deg(self) -> np.ndarray:
        return self.az_start_deg + self.az_step_deg * np.arange(self.n_az)

    @property
    def el_deg(self) -> np.ndarray:
        return self.el_start_deg + self.el_step_deg * np.arange(self.n_el)


def _cos_power(hpbw_deg: float) -> float:
    """Exponent p with cos(x)^(2p) = 1/2 at x = hpbw/2 (half-power width)."""
    half = np.deg2rad(hpbw_deg / 2)
    return np.log(0.5) / (2 * np.log(np.cos(half)))


def synth_pattern(geometry: ArrayGeometry, hpbw_az_deg: float = 85.0,
                  hpbw_el_deg: float = 50.0, xpd_db: float = 30.0,
                  frequencies_hz=(28e9,), az_step_deg: float = 2.0,
                  el_step_deg: float = 5.0, feed_pol=None) -> PatternGrid:
    """Cosine-power element patterns with plane-wave geometry phases.

    Each element's co-polarized amplitude is cos^p(az - yaw) * cos^p(el) with p
    set by the half-power beamwidths; the cross-polarized amplitude sits
    xpd_db below.  hpbw = 180 is the isotropic sentinel (constant gain).
    feed_pol optionally gives each element's nominal polarization (0=H, 1=V);
    default alternates for dual-feed layouts with co-located pairs, else H.
    """
    for h in (hpbw_az_deg, hpbw_el_deg):
        if not (0 < h <= ISOTROPIC_HPBW_DEG):
            raise ValueError(f"HPBW {h} out of (0, 180]")
    if xpd_db < 0:
        raise ValueError("xpd_db must be >= 0")

    az = np.deg2rad(np.arange(-180.0, 180.0, az_step_deg))
    el = np.deg2rad(np.arange(-90.0, 90.0 + 1e-9, el_step_deg))
    n_az, n_el = len(az), len(el)
    AZ, EL = np.meshgrid(az, el, indexing="ij")
    u = np.stack([np.cos(EL) * np.cos(AZ), np.cos(EL) * np.sin(AZ), np.sin(EL)], axis=-1)

    n_elem = geometry.n_elements
    if feed_pol is None:
        co_located = (n_elem % 2 == 0 and n_elem > 1 and
                      np.allclose(geometry.positions[0::2], geometry.positions[1::2]))
        feed_pol = np.tile([0, 1], n_elem // 2) if co_located else np.zeros(n_elem, int)
    feed_pol = np.asarray(feed_pol, int)

    iso_az = hpbw_az_deg >= ISOTROPIC_HPBW_DEG
    iso_el = hpbw_el_deg >= ISOTROPIC_HPBW_DEG
    p_az = None if iso_az else _cos_power(hpbw_az_deg)
    p_el = None if iso_el else _cos_power(hpbw_el_deg)
    xpl = 10 ** (-xpd_db / 20)

    gains = np.zeros((n_elem, 2, len(frequencies_hz), n_az, n_el), complex)
    for e in range(n_elem):
        yaw = np.arctan2(geometry.orientations[e, 1], geometry.orientations[e, 0])
        ca = np.maximum(np.cos(AZ - yaw), 0.0)
        amp = np.ones_like(AZ) if iso_az else ca**p_az
        if not iso_el:
            amp = amp * np.maximum(np.cos(EL), 0.0) ** p_el
        for fi, f in enumerate(frequencies_hz):
            phase = np.exp(2j * np.pi * f / C0 * (u @ geometry.positions[e]))
            co = feed_pol[e]
            gains[e, co, fi] = amp * phase
            gains[e, 1 - co, fi] = xpl * amp * phase
    return PatternGrid(az_start_deg=-180.0, az_step_deg=az_step_deg, n_az=n_az,
                       el_start_deg=-90.0, el_step_deg=el_step_deg, n_el=n_el,
                       frequencies_hz=tuple(frequencies_hz), gains=gains)


# ---------------------------------------------------------------------------
# EADF

def _extend_elevation(g: np.ndarray, n_az: int, n_el: int) -> np.ndarray:
    """Periodic sphere-cut extension: el' in (90, 270) maps to (az+180, 180-el')."""
    n_ext = 2 * (n_el - 1)
    out = np.zeros(g.shape[:-2] + (n_az, n_ext), complex)
    out[..., :n_el] = g
    for jp in range(n_el, n_ext):
        out[..., jp] = np.roll(g[..., 2 * (n_el - 1) - jp], n_az // 2, axis=-1)
    return out


@dataclass(frozen=True)
class Eadf:
    """2-D Fourier coefficients of the extended patterns plus evaluation grid info.

    coefficients is [element, pol, freq, az_mode, el_mode] over the signed mode
    index lists modes_az / modes_el.  Evaluation is a trigonometric polynomial:
    exact at source grid nodes for untruncated coefficients.
    """

    coefficients: np.ndarray
    modes_az: np.ndarray
    modes_el: np.ndarray
    az_start_deg: float
    az_step_deg: float
    n_az: int
    n_el_ext: int
    el_start_deg: float
    el_step_deg: float
    frequencies_hz: tuple
    truncation: tuple | None
    reconstruction_error_db: float
    source_checksum: str = ""

    @property
    def n_elements(self) -> int:
        return self.coefficients.shape[0]

    def _freq_index(self, frequency_hz) -> int:
        freqs = np.asarray(self.frequencies_hz)
        if frequency_hz is None:
            if len(freqs) != 1:
                raise ValueError("frequency_hz required for a multi-frequency EADF")
            return 0
        i = int(np.argmin(np.abs(freqs - frequency_hz)))
        if len(freqs) > 1:
            half = (freqs.max() - freqs.min()) / (len(freqs) - 1) / 2
            if abs(freqs[i] - frequency_hz) > half * (1 + 1e-9):
                raise ValueError(
                    f"frequency {frequency_hz/1e9:.3f} GHz outside the characterized band")
        return i

    def _basis(self, az_rad, el_rad):
        u = (np.rad2deg(np.atleast_1d(az_rad)) - self.az_start_deg) / self.az_step_deg
        v = (np.rad2deg(np.atleast_1d(el_rad)) - self.el_start_deg) / self.el_step_deg
        ea = np.exp(2j * np.pi * np.outer(self.modes_az, u) / self.n_az)
        ee = np.exp(2j * np.pi * np.outer(self.modes_el, v) / self.n_el_ext)
        return ea, ee

    def response(self, az_rad, el_rad, frequency_hz=None) -> np.ndarray:
        """Manifold response, shape (n_elements, 2[, n_angles]).

        az_rad/el_rad may be scalars or matching 1-D arrays (paired angles).
        """
        fi = self._freq_index(frequency_hz)
        ea, ee = self._basis(az_rad, el_rad)
        out = np.einsum("epab,aq,bq->epq", self.coefficients[:, :, fi], ea, ee, optimize=True)
        if np.isscalar(az_rad) or np.ndim(az_rad) == 0:
            return out[:, :, 0]
        return out

    def response_with_derivs(self, az_rad, el_rad, frequency_hz=None):
        """Response plus analytic d/daz and d/del (radians), same shapes."""
        fi = self._freq_index(frequency_hz)
        ea, ee = self._basis(az_rad, el_rad)
        coef = self.coefficients[:, :, fi]
        # d/d(angle) = d/d(index) / (step in radians)
        ja = 2j * np.pi * self.modes_az / self.n_az / np.deg2rad(self.az_step_deg)
        je = 2j * np.pi * self.modes_el / self.n_el_ext / np.deg2rad(self.el_step_deg)
        b = np.einsum("epab,aq,bq->epq", coef, ea, ee, optimize=True)
        daz = np.einsum("epab,aq,bq->epq", coef, ja[:, None] * ea, ee, optimize=True)
        del_ = np.einsum("epab,aq,bq->epq", coef, ea, je[:, None] * ee, optimize=True)
        return b, daz, del_

    def response_grid(self, az_rad: np.ndarray, el_rad: np.ndarray,
                      frequency_hz=None) -> np.ndarray:
        """Response on the outer product of angle lists, (n_elem, 2, n_az, n_el)."""
        fi = self._freq_index(frequency_hz)
        ea, ee = self._basis(az_rad, el_rad)
        return np.einsum("epab,aq,br->epqr", self.coefficients[:, :, fi], ea, ee, optimize=True)


def compute_eadf(grid: PatternGrid, truncation: tuple | None = None) -> Eadf:
    """2-D DFT of the elevation-extended patterns, optionally mode-truncated.

    truncation (t_az, t_el) keeps modes |k| <= t; the relative Frobenius
    reconstruction error over the source grid is recorded (never silently
    accepted).
    """
    n_az, n_el = grid.n_az, grid.n_el
    if n_el < 2:
        raise ValueError("elevation grid needs at least 2 points")
    ext = _extend_elevation(grid.gains, n_az, n_el)
    n_ext = ext.shape[-1]
    coef = np.fft.fft2(ext, axes=(-2, -1)) / (n_az * n_ext)
    modes_az = np.fft.fftfreq(n_az, 1 / n_az).astype(int)
    modes_el = np.fft.fftfreq(n_ext, 1 / n_ext).astype(int)

    if truncation is not None:
        t_az, t_el = truncation
        ka = np.where(np.abs(modes_az) <= t_az)[0]
        ke = np.where(np.abs(modes_el) <= t_el)[0]
        coef = coef[..., ka[:, None], ke[None, :]]
        modes_az = modes_az[ka]
        modes_el = modes_el[ke]

    eadf = Eadf(coefficients=coef, modes_az=modes_az, modes_el=modes_el,
                az_start_deg=grid.az_start_deg, az_step_deg=grid.az_step_deg,
                n_az=n_az, n_el_ext=n_ext, el_start_deg=grid.el_start_deg,
                el_step_deg=grid.el_step_deg, frequencies_hz=grid.frequencies_hz,
                truncation=truncation, reconstruction_error_db=np.nan,
                source_checksum=_grid_checksum(grid))

    err = _reconstruction_error_db(eadf, grid)
    return replace(eadf, reconstruction_error_db=err)


def _reconstruction_error_db(eadf: Eadf, grid: PatternGrid) -> float:
    az = np.deg2rad(grid.az_deg)
    el = np.deg2rad(grid.el_deg)
    num = 0.0
    den = 0.0
    for fi in range(len(grid.frequencies_hz)):
        rec = eadf.response_grid(az, el, grid.frequencies_hz[fi])
        diff = rec - grid.gains[:, :, fi]
        num += np.sum(np.abs(diff) ** 2)
        den += np.sum(np.abs(grid.gains[:, :, fi]) ** 2)
    if den == 0:
        return -np.inf
    rel = np.sqrt(num / den)
    return 20 * np.log10(max(rel, 1e-300))


def _grid_checksum(grid: PatternGrid) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(grid.gains).tobytes())
    h.update(json.dumps([grid.az_start_deg, grid.az_step_deg, grid.el_start_deg,
                         grid.el_step_deg, list(grid.frequencies_hz)]).encode())
    return h.hexdigest()[:16]


def desk_eadf(geometry: ArrayGeometry, isotropic: bool = False, **kwargs) -> Eadf:
    """Convenience: synthesize patterns for a geometry and compress them."""
    if isotropic:
        kwargs.setdefault("hpbw_az_deg", ISOTROPIC_HPBW_DEG)
        kwargs.setdefault("hpbw_el_deg", ISOTROPIC_HPBW_DEG)
    return compute_eadf(synth_pattern(geometry, **kwargs))


# ---------------------------------------------------------------------------
# calibration-directory and cache file formats

def save_calibration(grid: PatternGrid, directory) -> str:
    """Write the calibration directory: JSON header + per-element binary grids.

    Each element file holds little-endian float32 interleaved I/Q in C-order
    [pol][freq][el][az].
    """
    directory = str(directory)
    os.makedirs(directory, exist_ok=True)
    files = []
    for e in range(grid.n_elements):
        name = f"element_{e:04d}.bin"
        # stored order [pol][freq][el][az]
        g = np.transpose(grid.gains[e], (0, 1, 3, 2)).astype(np.complex64)
        iq = np.empty(g.size * 2, dtype="<f4")
        iq[0::2] = g.real.ravel()
        iq[1::2] = g.imag.ravel()
        with open(os.path.join(directory, name), "wb") as f:
            f.write(iq.tobytes())
        files.append(name)
    header = {
        "schema": CALIBRATION_SCHEMA,
        "az_start_deg": grid.az_start_deg, "az_step_deg": grid.az_step_deg,
        "n_az": grid.n_az,
        "el_start_deg": grid.el_start_deg, "el_step_deg": grid.el_step_deg,
        "n_el": grid.n_el,
        "frequencies_hz": list(grid.frequencies_hz),
        "n_elements": grid.n_elements,
        "files": files,
    }
    path = os.path.join(directory, "header.json")
    with open(path, "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    return directory


def load_calibration(directory) -> PatternGrid:
    directory = str(directory)
    with open(os.path.join(directory, "header.json")) as f:
        hd = json.load(f)
    if hd.get("schema") != CALIBRATION_SCHEMA:
        raise ValueError(f"unsupported calibration schema {hd.get('schema')!r}")
    n_az, n_el, n_f = hd["n_az"], hd["n_el"], len(hd["frequencies_hz"])
    gains = np.zeros((hd["n_elements"], 2, n_f, n_az, n_el), complex)
    for e, name in enumerate(hd["files"]):
        iq = np.frombuffer(open(os.path.join(directory, name), "rb").read(), dtype="<f4")
        g = (iq[0::2] + 1j * iq[1::2]).reshape(2, n_f, n_el, n_az)
        gains[e] = np.transpose(g, (0, 1, 3, 2))
    return PatternGrid(az_start_deg=hd["az_start_deg"], az_step_deg=hd["az_step_deg"],
                       n_az=n_az, el_start_deg=hd["el_start_deg"],
                       el_step_deg=hd["el_step_deg"], n_el=n_el,
                       frequencies_hz=tuple(hd["frequencies_hz"]), gains=gains)


def save_eadf_cache(eadf: Eadf, path) -> str:
    np.savez_compressed(
        str(path), coefficients=eadf.coefficients, modes_az=eadf.modes_az,
        modes_el=eadf.modes_el,
        meta=json.dumps({
            "az_start_deg": eadf.az_start_deg, "az_step_deg": eadf.az_step_deg,
            "n_az": eadf.n_az, "n_el_ext": eadf.n_el_ext,
            "el_start_deg": eadf.el_start_deg, "el_step_deg": eadf.el_step_deg,
            "frequencies_hz": list(eadf.frequencies_hz),
            "truncation": list(eadf.truncation) if eadf.truncation else None,
            "reconstruction_error_db": eadf.reconstruction_error_db,
            "source_checksum": eadf.source_checksum,
        }))
    return str(path)


def load_eadf_cache(path) -> Eadf:
    with np.load(str(path)) as z:
        meta = json.loads(str(z["meta"]))
        trunc = tuple(meta["truncation"]) if meta["truncation"] else None
        return Eadf(coefficients=z["coefficients"], modes_az=z["modes_az"],
                    modes_el=z["modes_el"], az_start_deg=meta["az_start_deg"],
                    az_step_deg=meta["az_step_deg"], n_az=meta["n_az"],
                    n_el_ext=meta["n_el_ext"], el_start_deg=meta["el_start_deg"],
                    el_step_deg=meta["el_step_deg"],
                    frequencies_hz=tuple(meta["frequencies_hz"]), truncation=trunc,
                    reconstruction_error_db=meta["reconstruction_error_db"],
                    source_checksum=meta["source_checksum"])
