"""Maximum-likelihood-style multipath parameter estimation.

Inverts the forward model: successive extraction of specular paths by coarse
matched-filter search over delay, Doppler and both link-end angles, a linear
polarimetric gain solve, and joint damped Gauss-Newton refinement of all
continuous parameters; then a dense-multipath fit on the residual and
nearest-neighbor tracking across snapshots.

The estimator works on the window-weighted tone spectra recovered from the
CIR tensor (the taper is part of the observation model, never divided out),
and uses each schedule entry's own acquisition timestamp -- with a
pseudo-random codebook this is what disambiguates Doppler far beyond the
snapshot repetition rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
import json

import numpy as np

from .arrays import Eadf
from .channel import AngularSpread, DenseProfile, freq_psd
from .schedule import SwitchSchedule, NS_PER_S
from .sounder import CirTensor, hann_window

LN2 = float(np.log(2.0))


# ---------------------------------------------------------------------------
# Doppler ambiguity of a switching schedule

@dataclass
class AmbiguityFunction:
    """Normalized timestamp-pattern correlation versus Doppler hypothesis."""

    doppler_grid_hz: np.ndarray
    magnitude: np.ndarray

    def max_sidelobe(self, exclude_below_hz: float) -> float:
        """Largest magnitude at |doppler| >= the exclusion edge (mainlobe cut)."""
        m = np.abs(self.doppler_grid_hz) >= exclude_below_hz
        if not np.any(m):
            raise ValueError("exclusion removes the whole grid")
        return float(self.magnitude[m].max())


def doppler_ambiguity(schedule: SwitchSchedule, doppler_grid_hz,
                      n_snapshots: int = 1) -> AmbiguityFunction:
    """Ambiguity of the schedule's time sampling, grouped per receive element.

    magnitude(nu) = mean over receive elements of |mean_k exp(j 2 pi nu t_k)|
    over that element's acquisition timestamps.  Sequential ordering revisits
    each element periodically, producing grating peaks at multiples of the
    per-element revisit rate; pseudo-random ordering scatters the timestamps
    and suppresses them.
    """
    if len(schedule) == 0:
        raise ValueError("empty schedule")
    grid = np.atleast_1d(np.asarray(doppler_grid_hz, float))
    t0 = schedule.timestamps_ns / NS_PER_S
    t_all = np.concatenate([t0 + s * schedule.snapshot_duration_s
                            for s in range(n_snapshots)])
    rx_all = np.tile(schedule.codebook.rx, n_snapshots)
    mag = np.zeros(grid.size)
    groups = [np.where(rx_all == r)[0] for r in np.unique(rx_all)]
    for gi in groups:
        ph = np.exp(2j * np.pi * np.outer(grid, t_all[gi]))
        mag += np.abs(ph.mean(axis=1))
    mag /= len(groups)
    return AmbiguityFunction(doppler_grid_hz=grid, magnitude=mag)


# ---------------------------------------------------------------------------
# results

@dataclass
class PathEstimate:
    """One estimated specular path (gain referenced to the band center)."""

    delay_s: float
    aoa_az_rad: float
    aoa_el_rad: float
    aod_az_rad: float
    aod_el_rad: float
    doppler_hz: float
    gain: np.ndarray                 # 2x2 complex [rx_pol, tx_pol]
    power: float                     # sum |gain|^2
    improvement: float               # residual power removed by this path
    converged: bool = True

    @property
    def power_db(self) -> float:
        return 10 * np.log10(max(self.power, 1e-300))


@dataclass
class EstimationResult:
    paths: list
    dense_fit: DenseProfile | None = None
    noise_var_est: float = 0.0
    log_likelihood: float = 0.0
    iterations: int = 0
    converged: bool = True
    diagnostics: dict = field(default_factory=dict)


@dataclass
class EstimatorConfig:
    """Knobs of the specular search; defaults match the desk-scale contract."""

    max_paths: int = 10
    margin_db: float = 6.0           # detection margin over the noise-max level
    min_rel_improvement: float = 1e-12
    delay_pad: int = 4               # delay grid = bin / delay_pad
    doppler_search: bool | None = None   # None: on iff more than one snapshot
    doppler_max_hz: float | None = None  # None: 1 / (2 frame duration)
    coarse_angle_step_deg: float = 2.0
    refine_iters: int = 40
    refine_cycles: int = 2
    pol: str = "auto"                # "auto", "scalar_h", "scalar_v", "full"
    max_tones: int = 512             # larger inputs are tone-decimated
    max_entries: int = 4096          # larger schedules are entry-decimated


def _fold_direction(az: float, el: float):
    """Fold (az, el) into principal ranges, mirroring over-the-pole excursions."""
    el = (el + np.pi) % (2 * np.pi) - np.pi
    if el > np.pi / 2:
        el = np.pi - el
        az = az + np.pi
    elif el < -np.pi / 2:
        el = -np.pi - el
        az = az + np.pi
    az = (az + np.pi) % (2 * np.pi) - np.pi
    return az, el


class _SpecularFitter:
    """Working state for successive specular extraction on one tensor."""

    def __init__(self, cir: CirTensor, tx_eadf: Eadf, rx_eadf: Eadf,
                 schedule: SwitchSchedule, config: EstimatorConfig,
                 snapshots=None):
        self.cfg = config
        self.tx_eadf = tx_eadf
        self.rx_eadf = rx_eadf
        self.fc = cir.center_frequency_hz

        snaps = list(range(cir.n_snapshots)) if snapshots is None else list(snapshots)
        vals = cir.values[snaps]                     # (S, M, T, R)
        m_f = vals.shape[1]
        w = hann_window(m_f)
        spec = np.fft.fft(vals, axis=1)              # w * H + noise

        cb = schedule.codebook
        tx_idx = np.asarray(cb.tx)
        rx_idx = np.asarray(cb.rx)
        t0 = schedule.timestamps_ns / NS_PER_S
        t_abs = np.stack([t0 + s * schedule.snapshot_duration_s for s in snaps])

        # entry/tone decimation guard for beyond-desk-scale inputs
        tone_step = int(np.ceil(m_f / config.max_tones))
        entry_step = int(np.ceil(len(cb) / config.max_entries))
        k_sel = np.arange(0, m_f, tone_step)
        e_sel = np.arange(0, len(cb), entry_step)

        self.f_rel = (k_sel - (m_f - 1) / 2) * cir.tone_spacing_hz
        self.w = w[k_sel]
        # correlation grid spacing of the decimated comb (1/BW when undecimated)
        self.delay_bin = 1.0 / (len(k_sel) * tone_step * cir.tone_spacing_hz)
        self.m_f = len(k_sel)
        self.tx_idx = tx_idx[e_sel]
        self.rx_idx = rx_idx[e_sel]
        self.t_abs = t_abs[:, e_sel]                 # (S, E)
        self.t_ref = float(self.t_abs.mean())
        self.frame_s = schedule.frame.frame_duration_s
        self.snap_s = schedule.snapshot_duration_s
        self.n_s, self.n_e = self.t_abs.shape

        # observations (S, E, K)
        self.y = spec[:, k_sel][:, :, tx_idx[e_sel], rx_idx[e_sel]].transpose(0, 2, 1)
        self.y = np.ascontiguousarray(self.y)
        self.total_power0 = float(np.sum(np.abs(self.y) ** 2))

        # polarization handling
        if config.pol == "auto":
            self.full_pol = bool(cb.dual_pol)
            self.p0 = 0
        elif config.pol == "full":
            self.full_pol = True
            self.p0 = 0
        else:
            self.full_pol = False
            self.p0 = 0 if config.pol == "scalar_h" else 1

        # coarse angle grids and manifold tables (reused across paths)
        step = config.coarse_angle_step_deg
        self.az_grid = np.deg2rad(np.arange(-180.0, 180.0, step))
        self.el_grid = np.deg2rad(np.arange(-90.0, 90.0 + 1e-9, step))
        br = rx_eadf.response_grid(self.az_grid, self.el_grid, self.fc)
        bt = tx_eadf.response_grid(self.az_grid, self.el_grid, self.fc)
        if self.full_pol:
            self.bg_rx = br.reshape(br.shape[0], 2, -1)
            self.bg_tx = bt.reshape(bt.shape[0], 2, -1)
        else:
            self.bg_rx = br[:, self.p0].reshape(br.shape[0], 1, -1)
            self.bg_tx = bt[:, self.p0].reshape(bt.shape[0], 1, -1)
        self.iterations = 0

    # -- noise level ------------------------------------------------------

    def noise_unit(self, y_res: np.ndarray) -> float:
        """Expected matched-filter improvement from noise alone (one cell)."""
        h = np.fft.ifft(y_res, axis=2)
        sigma_h2 = np.median(np.abs(h) ** 2) / LN2
        sw2 = np.sum(self.w ** 2)
        sigma_tone2 = sigma_h2 * self.m_f**2 / sw2
        return sigma_tone2 * np.sum(self.w ** 4) / sw2

    # -- coarse search stages ----------------------------------------------

    def delay_search(self, y_res: np.ndarray):
        """Noncoherent delay spectrum over a delay_pad-times-finer grid."""
        pad = self.cfg.delay_pad
        n_fft = pad * self.m_f
        g = y_res * np.conj(self.w)[None, None, :]
        z = np.fft.ifft(g, n=n_fft, axis=2) * n_fft      # correlation vs tau grid
        p = np.sum(np.abs(z) ** 2, axis=(0, 1))
        m_hat = int(np.argmax(p))
        return m_hat * self.delay_bin / pad

    def _model_tone_phase(self, tau: float) -> np.ndarray:
        return self.w * np.exp(-2j * np.pi * self.f_rel * tau)

    def entry_amplitudes(self, y_res: np.ndarray, tau: float) -> np.ndarray:
        """Per-entry complex amplitude from the delay-matched filter, (S, E)."""
        m = self._model_tone_phase(tau)
        return y_res @ np.conj(m) / np.sum(np.abs(m) ** 2)

    def doppler_candidates(self, a: np.ndarray):
        """Candidate Doppler list from the per-entry (pair) coherence metric.

        The metric ties at aliases spaced by the snapshot rate (entry revisit
        is one snapshot for any fixed codebook); all aliases in range are
        returned and the angle-coherent score arbitrates between them.
        """
        cfg = self.cfg
        search = cfg.doppler_search
        if search is None:
            search = self.n_s > 1
        if not search:
            return [0.0], None
        nu_max = cfg.doppler_max_hz or 1.0 / (2 * self.frame_s)
        span = self.t_abs.max() - self.t_abs.min()
        step = 1.0 / (4 * span)
        grid = np.arange(-nu_max, nu_max + step / 2, step)
        g = np.empty(grid.size)
        for lo in range(0, grid.size, 512):
            chunk = grid[lo:lo + 512]
            ph = np.exp(-2j * np.pi * np.einsum("n,se->nse", chunk, self.t_abs))
            g[lo:lo + 512] = np.sum(np.abs(np.einsum("se,nse->ne", a, ph)) ** 2, axis=1)
        nu0 = grid[int(np.argmax(g))]
        alias = 1.0 / self.snap_s
        k_lo = int(np.ceil((-nu_max - nu0) / alias))
        k_hi = int(np.floor((nu_max - nu0) / alias))
        cands = [nu0 + k * alias for k in range(k_lo, k_hi + 1)]
        return cands, grid

    def angle_search(self, a: np.ndarray, nu: float):
        """Best (aoa, aod) on the coarse grids for a Doppler hypothesis.

        Returns (score, aoa_az, aoa_el, aod_az, aod_el); score is the coherent
        matched power used to arbitrate Doppler aliases.
        """
        demod = a * np.exp(-2j * np.pi * nu * (self.t_abs - self.t_ref))
        amat = np.zeros((self.bg_tx.shape[0], self.bg_rx.shape[0]), complex)
        np.add.at(amat, (self.tx_idx[None, :].repeat(self.n_s, 0),
                         self.rx_idx[None, :].repeat(self.n_s, 0)), demod)
        amat /= self.n_s

        # receive side: project each tx row on every rx steering vector;
        # cells where the array has essentially no gain cannot be steered to
        num = 0.0
        z_by_pol = []
        for p in range(self.bg_rx.shape[1]):
            z = np.einsum("rc,tr->tc", np.conj(self.bg_rx[:, p]), amat)
            z_by_pol.append(z)
            num = num + np.abs(z) ** 2
        d_r = np.sum(np.abs(self.bg_rx) ** 2, axis=(0, 1))
        ok_r = d_r > 1e-6 * d_r.max()
        score_r = np.where(ok_r, num.sum(axis=0) / np.maximum(d_r, 1e-300), 0.0)
        c_r = int(np.argmax(score_r))

        # transmit side: match tx steering against the rx-projected rows; the
        # joint score |b_t^H A^H b_r|^2 / (|b_r|^2 |b_t|^2) is bounded by the
        # demodulated power, so weak-gain cells cannot dominate
        u = sum(z[:, c_r] for z in z_by_pol)
        num_t = 0.0
        for p in range(self.bg_tx.shape[1]):
            num_t = num_t + np.abs(np.conj(self.bg_tx[:, p]).T @ u) ** 2
        d_t = np.sum(np.abs(self.bg_tx) ** 2, axis=(0, 1))
        ok_t = ok_r[c_r] & (d_t > 1e-6 * d_t.max())
        score_t = np.where(ok_t, num_t / np.maximum(d_t * d_r[c_r], 1e-300), 0.0)
        c_t = int(np.argmax(score_t))

        n_el = self.el_grid.size
        aoa_az = self.az_grid[c_r // n_el]
        aoa_el = self.el_grid[c_r % n_el]
        aod_az = self.az_grid[c_t // n_el]
        aod_el = self.el_grid[c_t % n_el]
        return float(score_t[c_t]), aoa_az, aoa_el, aod_az, aod_el

    # -- model and refinement ----------------------------------------------

    def _pol_basis(self):
        if self.full_pol:
            return [(0, 0), (0, 1), (1, 0), (1, 1)]
        return [(self.p0, self.p0)]

    def model_components(self, theta, derivs: bool = False):
        """Per-gain-component model tensors m_i(theta), each (S, E, K).

        theta = (tau, aoa_az, aoa_el, aod_az, aod_el, nu).  With derivs, also
        returns d(m_i)/d(theta_j) for the six continuous parameters.
        """
        tau, ra, re, ta, te, nu = theta
        if derivs:
            br, br_a, br_e = self.rx_eadf.response_with_derivs(ra, re, self.fc)
            bt, bt_a, bt_e = self.tx_eadf.response_with_derivs(ta, te, self.fc)
            br, br_a, br_e = br[..., 0], br_a[..., 0], br_e[..., 0]
            bt, bt_a, bt_e = bt[..., 0], bt_a[..., 0], bt_e[..., 0]
        else:
            br = self.rx_eadf.response(ra, re, self.fc)
            bt = self.tx_eadf.response(ta, te, self.fc)

        tone = self._model_tone_phase(tau)                       # (K,)
        dop = np.exp(2j * np.pi * nu * (self.t_abs - self.t_ref))  # (S, E)
        base = dop[:, :, None] * tone[None, None, :]

        comps, dcomps = [], []
        for (p, q) in self._pol_basis():
            c_e = br[self.rx_idx, p] * bt[self.tx_idx, q]        # (E,)
            m = c_e[None, :, None] * base
            comps.append(m)
            if derivs:
                d_tau = m * (-2j * np.pi * self.f_rel)[None, None, :]
                d_nu = m * (2j * np.pi * (self.t_abs - self.t_ref))[:, :, None]
                d_ra = (br_a[self.rx_idx, p] * bt[self.tx_idx, q])[None, :, None] * base
                d_re = (br_e[self.rx_idx, p] * bt[self.tx_idx, q])[None, :, None] * base
                d_ta = (br[self.rx_idx, p] * bt_a[self.tx_idx, q])[None, :, None] * base
                d_te = (br[self.rx_idx, p] * bt_e[self.tx_idx, q])[None, :, None] * base
                dcomps.append([d_tau, d_ra, d_re, d_ta, d_te, d_nu])
        return (comps, dcomps) if derivs else comps

    def solve_gains(self, comps, y_res):
        """Least-squares complex gains for the current component models.

        A vanishing model (pattern null) gets zero gain instead of blowing up.
        """
        a = np.stack([c.ravel() for c in comps], axis=1)
        norms = np.sum(np.abs(a) ** 2, axis=0)
        floor = 1e-12 * max(y_res.size, 1)
        if np.all(norms < floor):
            return np.zeros(len(comps), complex)
        g, *_ = np.linalg.lstsq(a, y_res.ravel(), rcond=1e-9)
        return g

    def refine(self, theta0, y_res):
        """Damped Gauss-Newton on the six continuous parameters.

        Gains are re-solved linearly each iteration (projection); the step is
        Levenberg-Marquardt damped on the scaled parameters.
        """
        span = max(self.t_abs.max() - self.t_abs.min(), self.frame_s)
        scales = np.array([self.delay_bin / self.cfg.delay_pad,
                           0.02, 0.02, 0.02, 0.02, 1.0 / (2 * np.pi * span)])
        theta = np.asarray(theta0, float).copy()
        comps = self.model_components(theta)
        g = self.solve_gains(comps, y_res)
        model = sum(gi * c for gi, c in zip(g, comps))
        res = y_res - model
        cost = np.sum(np.abs(res) ** 2)
        lam = 1e-2
        converged = False
        for _ in range(self.cfg.refine_iters):
            self.iterations += 1
            comps, dcomps = self.model_components(theta, derivs=True)
            g = self.solve_gains(comps, y_res)
            model = sum(gi * c for gi, c in zip(g, comps))
            res = y_res - model
            cost = np.sum(np.abs(res) ** 2)
            jac = np.zeros((res.size, 6), complex)
            for gi, dlist in zip(g, dcomps):
                for j in range(6):
                    jac[:, j] += gi * dlist[j].ravel()
            jac *= scales[None, :]
            jtj = np.real(jac.conj().T @ jac)
            jtr = np.real(jac.conj().T @ res.ravel())
            accepted = False
            for _try in range(8):
                try:
                    step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj))
                                           + 1e-30 * np.eye(6), jtr)
                except np.linalg.LinAlgError:
                    lam *= 10
                    continue
                cand = theta + scales * step
                comps_c = self.model_components(cand)
                g_c = self.solve_gains(comps_c, y_res)
                model_c = sum(gi * c for gi, c in zip(g_c, comps_c))
                cost_c = np.sum(np.abs(y_res - model_c) ** 2)
                if cost_c < cost:
                    rel = (cost - cost_c) / max(cost, 1e-300)
                    theta, g, model, cost, accepted = cand, g_c, model_c, cost_c, True
                    lam = max(lam * 0.3, 1e-12)
                    if rel < 1e-12:
                        converged = True
                    break
                lam *= 10
            if not accepted:
                converged = True   # no descent direction left: local optimum
            if converged:
                break
        return theta, g, model, cost, converged

    def gains_to_matrix(self, g) -> np.ndarray:
        gm = np.zeros((2, 2), complex)
        for gi, (p, q) in zip(g, self._pol_basis()):
            gm[p, q] = gi
        return gm


def estimate_specular(cir: CirTensor, tx_eadf: Eadf, rx_eadf: Eadf,
                      schedule: SwitchSchedule, max_paths: int | None = None,
                      config: EstimatorConfig | None = None,
                      snapshots=None) -> EstimationResult:
    """Successively extract specular paths from an acquired CIR tensor.

    Stops when the best remaining candidate's residual-power improvement falls
    below the noise-maximum estimate plus the configured margin.  Returns paths
    sorted by power, each with its residual improvement; non-convergence is
    reported through the flags, never silently.
    """
    cfg = config or EstimatorConfig()
    if max_paths is not None:
        cfg = EstimatorConfig(**{**asdict(cfg), "max_paths": max_paths})
    fit = _SpecularFitter(cir, tx_eadf, rx_eadf, schedule, cfg, snapshots)

    y_res = fit.y.copy()
    paths = []
    models = []
    all_converged = True

    if fit.total_power0 == 0:
        return EstimationResult(paths=[], noise_var_est=0.0, converged=True,
                                diagnostics={"note": "zero input"})

    n_cells = (fit.az_grid.size * fit.el_grid.size) ** 2
    g_eff = fit.y.size * 16.0

    for _ in range(cfg.max_paths):
        tau0 = fit.delay_search(y_res)
        a = fit.entry_amplitudes(y_res, tau0)
        cands, _grid = fit.doppler_candidates(a)
        best = None
        for nu in cands:
            score, ra, re, ta, te = fit.angle_search(a, nu)
            if best is None or score > best[0]:
                best = (score, nu, ra, re, ta, te)
        _, nu0, ra0, re0, ta0, te0 = best

        theta, g, model, cost, conv = fit.refine(
            (tau0, ra0, re0, ta0, te0, nu0), y_res)
        res_power_before = np.sum(np.abs(y_res) ** 2)
        improvement = res_power_before - cost

        noise_unit = fit.noise_unit(y_res)
        threshold = (10 ** (cfg.margin_db / 10) * noise_unit
                     * max(np.log(g_eff), 1.0))
        if improvement < max(threshold, cfg.min_rel_improvement * fit.total_power0):
            break

        y_res = y_res - model
        az_r, el_r = _fold_direction(theta[1], theta[2])
        az_t, el_t = _fold_direction(theta[3], theta[4])
        gm = fit.gains_to_matrix(g)
        paths.append(PathEstimate(
            delay_s=float(theta[0]), aoa_az_rad=az_r, aoa_el_rad=el_r,
            aod_az_rad=az_t, aod_el_rad=el_t, doppler_hz=float(theta[5]),
            gain=gm, power=float(np.sum(np.abs(gm) ** 2)),
            improvement=float(improvement), converged=conv))
        models.append(model)
        all_converged &= conv

    # joint re-refinement cycles: polish each path against the others' residual
    for _cycle in range(cfg.refine_cycles if len(paths) > 1 else 0):
        for i, pe in enumerate(paths):
            y_res = y_res + models[i]
            before = np.sum(np.abs(y_res) ** 2)
            theta0 = (pe.delay_s, pe.aoa_az_rad, pe.aoa_el_rad,
                      pe.aod_az_rad, pe.aod_el_rad, pe.doppler_hz)
            theta, g, model, cost, conv = fit.refine(theta0, y_res)
            y_res = y_res - model
            models[i] = model
            az_r, el_r = _fold_direction(theta[1], theta[2])
            az_t, el_t = _fold_direction(theta[3], theta[4])
            gm = fit.gains_to_matrix(g)
            paths[i] = PathEstimate(
                delay_s=float(theta[0]), aoa_az_rad=az_r, aoa_el_rad=el_r,
                aod_az_rad=az_t, aod_el_rad=el_t, doppler_hz=float(theta[5]),
                gain=gm, power=float(np.sum(np.abs(gm) ** 2)),
                improvement=float(before - cost), converged=conv)

    paths.sort(key=lambda p: -p.power)
    h_res = np.fft.ifft(y_res, axis=2)
    sigma_h2 = float(np.median(np.abs(h_res) ** 2) / LN2)
    sw2 = np.sum(fit.w ** 2)
    noise_var = sigma_h2 * fit.m_f**2 / sw2
    n = y_res.size
    res_power = float(np.sum(np.abs(y_res) ** 2))
    sigma_y2 = max(res_power / n, 1e-300)
    ll = -n * np.log(np.pi * sigma_y2) - res_power / sigma_y2
    return EstimationResult(
        paths=paths, noise_var_est=noise_var, log_likelihood=float(ll),
        iterations=fit.iterations, converged=all_converged,
        diagnostics={"residual_power": res_power,
                     "initial_power": fit.total_power0,
                     "n_candidate_cells": n_cells})


def residual_cir(cir: CirTensor, result: EstimationResult, tx_eadf: Eadf,
                 rx_eadf: Eadf, schedule: SwitchSchedule,
                 snapshots=None) -> CirTensor:
    """CIR tensor with the estimated specular paths synthesized and removed."""
    from dataclasses import replace as _replace
    snaps = list(range(cir.n_snapshots)) if snapshots is None else list(snapshots)
    m_f = cir.m_f
    w = hann_window(m_f)
    k = np.arange(m_f)
    f_rel = (k - (m_f - 1) / 2) * cir.tone_spacing_hz
    cb = schedule.codebook
    t0 = schedule.timestamps_ns / NS_PER_S
    t_ref_all = np.stack([t0 + s * schedule.snapshot_duration_s for s in snaps])
    t_ref = float(t_ref_all.mean())
    vals = cir.values.copy()
    for pe in result.paths:
        br = rx_eadf.response(pe.aoa_az_rad, pe.aoa_el_rad, cir.center_frequency_hz)
        bt = tx_eadf.response(pe.aod_az_rad, pe.aod_el_rad, cir.center_frequency_hz)
        c_e = np.einsum("tq,pq,rp->tr", bt, pe.gain, br)[cb.tx, cb.rx]
        tone = w * np.exp(-2j * np.pi * f_rel * pe.delay_s)
        for si, s in enumerate(snaps):
            dop = np.exp(2j * np.pi * pe.doppler_hz * (t_ref_all[si] - t_ref))
            spec_entries = (c_e * dop)[:, None] * tone[None, :]
            h_entries = np.fft.ifft(spec_entries, axis=1)
            vals[s, :, cb.tx, cb.rx] -= h_entries
    return _replace(cir, values=vals)


# ---------------------------------------------------------------------------
# dense-profile estimation

def _von_mises_kappa_from_r(r: float) -> float:
    """Best-Fisher style inversion of the mean resultant length."""
    r = min(max(r, 0.0), 0.999999)
    if r < 0.53:
        return 2 * r + r**3 + 5 * r**5 / 6
    if r < 0.85:
        return -0.4 + 1.39 * r + 0.43 / (1 - r)
    return 1.0 / (r**3 - 4 * r**2 + 3 * r)


def _window_correlation(w: np.ndarray) -> np.ndarray:
    """Linear (non-circular) lag correlation W[kappa] = sum_k w[k] w[k-kappa]."""
    m_f = len(w)
    return np.array([np.sum(w[kk:] * w[:m_f - kk]) for kk in range(m_f)])


def _expected_profile(m0_fine: float, beta: float, m_f: int, wcorr: np.ndarray,
                      pad: int, tone_spacing_hz: float) -> np.ndarray:
    """Exact windowed delay-power profile of a unit dense process, fine grid.

    Computes E|h_fine[m]|^2 for the Toeplitz frequency covariance built from
    the sampled PSD, including window correlation and truncation effects.
    """
    tau_d_s = m0_fine / pad / (m_f * tone_spacing_hz)
    lam = freq_psd(tau_d_s, beta, 1.0, m_f, tone_spacing_hz)
    n_fft = pad * m_f
    spec = np.zeros(n_fft, complex)
    spec[0] = lam[0] * wcorr[0]
    spec[1:m_f] = lam[1:] * wcorr[1:]
    prof = np.fft.ifft(spec) * n_fft
    prof = (2 * prof.real - (lam[0] * wcorr[0]).real) / m_f**2
    return np.maximum(prof.real, 0.0)


def estimate_dense(residual: CirTensor, tx_eadf: Eadf, rx_eadf: Eadf,
                   pad: int = 4):
    """Fit the dense-multipath model to a specular-free residual tensor.

    The frequency profile (onset delay, decay, first-component power) is fit
    by weighted least squares on the log delay-power profile with the window
    smearing modeled exactly; angular spreads come from circular moment
    matching of the beamformed marginals; the noise floor from the late-delay
    level.  Returns (DenseProfile, diagnostics); a residual that never rises
    above the floor yields zero dense power plus a diagnostic.
    """
    m_f = residual.m_f
    w = hann_window(m_f)
    spec = np.fft.fft(residual.values, axis=1)
    h_fine = np.fft.ifft(spec, n=pad * m_f, axis=1) * pad
    prof = np.mean(np.abs(h_fine) ** 2, axis=(0, 2, 3))

    # robust floor: median of the lowest-quartile bins scaled for Rayleigh power
    order = np.sort(prof)
    floor = np.median(order[:max(len(order) // 4, 1)]) / LN2
    floor = max(floor, 1e-300)
    sw2 = np.sum(w ** 2)
    noise_var = floor * m_f**2 / sw2

    above = prof > 2.0 * floor
    run = np.convolve(above.astype(int), np.ones(3, int), mode="same") >= 3
    diagnostics = {"floor": floor, "profile_peak": float(prof.max())}
    if not np.any(run):
        diagnostics["note"] = "residual indistinguishable from noise"
        return (DenseProfile(tau_d_s=0.0, beta_d=1.0, gamma1=0.0,
                             noise_var=noise_var), diagnostics)

    # anchor the onset scan on the rising edge, not the (noisy, plateau-prone)
    # profile maximum: half-height crossing of the smeared step sits at the
    # onset because the window kernel is symmetric
    plateau = np.percentile(prof, 90)
    crossing = np.where(prof > floor + 0.5 * (plateau - floor))[0]
    m_rise = int(crossing[0]) if crossing.size else int(np.argmax(prof))
    wls_w = 1.0 / np.maximum(prof, floor) ** 2     # ~ log-domain least squares
    wcorr = _window_correlation(w)

    def fit_at(m0, beta):
        q = _expected_profile(float(m0), float(beta), m_f, wcorr, pad,
                              residual.tone_spacing_hz)
        basis = np.stack([q, np.ones_like(q)], axis=1)
        lhs = basis * wls_w[:, None]
        coef, *_ = np.linalg.lstsq(lhs.T @ basis, lhs.T @ prof, rcond=None)
        gamma1, fl = coef
        if gamma1 <= 0:
            return None
        modelp = np.maximum(gamma1 * q + max(fl, 0.0), 1e-300)
        cost = np.sum(wls_w * (prof - modelp) ** 2)
        return (cost, m0, beta, gamma1, max(fl, 0.0))

    best = None
    for m0 in np.arange(max(m_rise - 3 * pad, 0), m_rise + 2 * pad + 0.1, 1.0):
        for beta in np.geomspace(5e-4, 1.0, 40):
            cand = fit_at(m0, beta)
            if cand is not None and (best is None or cand[0] < best[0]):
                best = cand
    if best is not None:
        # local polish on a fractional onset grid and a denser decay grid
        _, m0c, betac, _, _ = best
        for m0 in np.arange(m0c - 1.0, m0c + 1.01, 0.25):
            for beta in np.geomspace(betac / 1.6, betac * 1.6, 17):
                cand = fit_at(max(m0, 0.0), beta)
                if cand is not None and cand[0] < best[0]:
                    best = cand
    if best is None:
        diagnostics["note"] = "profile fit failed"
        return (DenseProfile(tau_d_s=0.0, beta_d=1.0, gamma1=0.0,
                             noise_var=noise_var), diagnostics)
    _, m0, beta, gamma1, fl = best
    tau_d_s = m0 / pad * residual.delay_step_s
    if fl > 0:
        noise_var = fl * m_f**2 / sw2

    # angular moments from beamformed marginals at each end
    az = np.deg2rad(np.arange(-180.0, 180.0, 5.0))
    el = np.deg2rad(np.arange(-60.0, 60.0 + 1e-9, 10.0))
    rx_sp = _marginal_moments(residual.values, rx_eadf, az, el,
                              residual.center_frequency_hz, axis="rx")
    tx_sp = _marginal_moments(residual.values, tx_eadf, az, el,
                              residual.center_frequency_hz, axis="tx")
    diagnostics.update({"fit_cost": best[0]})
    profile = DenseProfile(tau_d_s=tau_d_s, beta_d=float(beta),
                           gamma1=float(gamma1), rx_spread=rx_sp,
                           tx_spread=tx_sp, noise_var=float(noise_var))
    return profile, diagnostics


def _marginal_moments(values: np.ndarray, eadf: Eadf, az: np.ndarray,
                      el: np.ndarray, fc: float, axis: str) -> AngularSpread:
    """Circular moment matching of the Bartlett marginal angular power."""
    b = eadf.response_grid(az, el, fc)           # (M, 2, naz, nel)
    h = values if axis == "rx" else values.transpose(0, 1, 3, 2)
    p = np.zeros((az.size, el.size))
    for q in range(2):
        z = np.einsum("rae,smtr->smtae", np.conj(b[:, q]), h, optimize=True)
        p += (np.abs(z) ** 2).sum(axis=(0, 1, 2)) / np.maximum(
            np.sum(np.abs(b[:, q]) ** 2, axis=0), 1e-300)
    p_az = p.sum(axis=1)
    p_el = (p * np.cos(el)[None, :]).sum(axis=0)
    m_az = np.sum(p_az * np.exp(1j * az)) / max(np.sum(p_az), 1e-300)
    m_el = np.sum(p_el * np.exp(1j * el)) / max(np.sum(p_el), 1e-300)
    return AngularSpread(
        mu_az_rad=float(np.angle(m_az)), mu_el_rad=float(np.angle(m_el)),
        kappa_az=float(_von_mises_kappa_from_r(abs(m_az))),
        kappa_el=float(_von_mises_kappa_from_r(abs(m_el))))


# ---------------------------------------------------------------------------
# track association across snapshots

@dataclass
class TrackRecord:
    time_s: float
    snapshot: int
    az_deg: float
    el_deg: float
    delay_ns: float
    power_db: float


@dataclass
class Track:
    track_id: int
    first_snapshot: int
    last_snapshot: int
    records: list


def track_aoa(results: list, snapshot_times_s, gate_delay_ns: float = 5.0,
              gate_az_deg: float = 5.0, gate_el_deg: float = 10.0,
              report_threshold_db: float = 30.0) -> list:
    """Associate per-snapshot path estimates into azimuth-AOA tracks.

    Greedy nearest-neighbor in normalized (delay, az, el) distance with a unit
    gate; unmatched estimates open new tracks (appearance), unmatched tracks
    close (disappearance after their last snapshot).  Paths weaker than
    report_threshold_db below the strongest one anywhere are dropped.
    """
    times = list(snapshot_times_s)
    if len(results) != len(times):
        raise ValueError("one snapshot time per result is required")
    peak_db = max((p.power_db for r in results for p in r.paths), default=0.0)
    tracks: list[Track] = []
    active: dict[int, tuple] = {}       # track_id -> (snapshot, delay, az, el)
    next_id = 0
    for s, (res, t) in enumerate(zip(results, times)):
        cands = [p for p in res.paths if p.power_db >= peak_db - report_threshold_db]
        pairs = []
        for ti, (last_s, d, a, e) in active.items():
            if last_s != s - 1:
                continue
            for ci, p in enumerate(cands):
                daz = np.rad2deg(np.angle(np.exp(1j * (p.aoa_az_rad - a))))
                dist = ((p.delay_s * 1e9 - d) / gate_delay_ns) ** 2 \
                    + (daz / gate_az_deg) ** 2 \
                    + ((np.rad2deg(p.aoa_el_rad) - e) / gate_el_deg) ** 2
                if dist <= 1.0:
                    pairs.append((dist, ti, ci))
        pairs.sort()
        used_t, used_c = set(), set()
        assign = {}
        for dist, ti, ci in pairs:
            if ti in used_t or ci in used_c:
                continue
            used_t.add(ti)
            used_c.add(ci)
            assign[ci] = ti
        for ci, p in enumerate(cands):
            rec = TrackRecord(time_s=float(t), snapshot=s,
                              az_deg=float(np.rad2deg(p.aoa_az_rad)),
                              el_deg=float(np.rad2deg(p.aoa_el_rad)),
                              delay_ns=float(p.delay_s * 1e9),
                              power_db=float(p.power_db))
            if ci in assign:
                ti = assign[ci]
                tracks[ti].records.append(rec)
                tracks[ti].last_snapshot = s
            else:
                ti = next_id
                next_id += 1
                tracks.append(Track(track_id=ti, first_snapshot=s,
                                    last_snapshot=s, records=[rec]))
            active[ti] = (s, rec.delay_ns, p.aoa_az_rad, rec.el_deg)
    return tracks


def tracks_to_csv(tracks: list, path) -> str:
    """CSV export: time_s, track_id, az_deg, el_deg, delay_ns, power_db."""
    with open(str(path), "w") as f:
        f.write("time_s,track_id,az_deg,el_deg,delay_ns,power_db\n")
        rows = [(r.time_s, tr.track_id, r) for tr in tracks for r in tr.records]
        rows.sort(key=lambda x: (x[0], x[1]))
        for t, tid, r in rows:
            f.write(f"{t:.9f},{tid},{r.az_deg:.4f},{r.el_deg:.4f},"
                    f"{r.delay_ns:.4f},{r.power_db:.4f}\n")
    return str(path)


# ---------------------------------------------------------------------------
# result export

def result_to_json(result: EstimationResult, path=None):
    doc = {
        "schema": "estimation-result/1",
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "noise_var_est": float(result.noise_var_est),
        "log_likelihood": float(result.log_likelihood),
        "paths": [
            {
                "delay_ns": p.delay_s * 1e9,
                "aoa_az_deg": float(np.rad2deg(p.aoa_az_rad)),
                "aoa_el_deg": float(np.rad2deg(p.aoa_el_rad)),
                "aod_az_deg": float(np.rad2deg(p.aod_az_rad)),
                "aod_el_deg": float(np.rad2deg(p.aod_el_rad)),
                "doppler_hz": float(p.doppler_hz),
                "gain": [[[float(v.real), float(v.imag)] for v in row]
                         for row in p.gain],
                "power_db": float(p.power_db),
                "improvement": float(p.improvement),
                "converged": bool(p.converged),
            }
            for p in result.paths
        ],
        "diagnostics": {k: (float(v) if isinstance(v, (int, float, np.floating))
                            else v)
                        for k, v in result.diagnostics.items()},
    }
    if result.dense_fit is not None:
        d = result.dense_fit
        doc["dense_fit"] = {
            "tau_d_ns": d.tau_d_s * 1e9, "beta_d": d.beta_d, "gamma1": d.gamma1,
            "noise_var": d.noise_var,
            "rx_spread": vars(d.rx_spread).copy(),
            "tx_spread": vars(d.tx_spread).copy(),
        }
    if path is not None:
        with open(str(path), "w") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
            f.write("\n")
    return doc
