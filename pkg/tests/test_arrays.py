import numpy as np
import pytest

import soundersim as ss
from soundersim.arrays import C0

LAM = C0 / 28e9


def padded_fft_oracle(eadf, pad=10):
    """Dense pattern reconstruction by zero-padded inverse FFT of the modes."""
    naz, nel = eadf.n_az, eadf.n_el_ext
    full = np.zeros(eadf.coefficients.shape[:3] + (naz * pad, nel * pad), complex)
    ia = eadf.modes_az % (naz * pad)
    ie = eadf.modes_el % (nel * pad)
    full[..., ia[:, None], ie[None, :]] = eadf.coefficients
    dense = np.fft.ifft2(full, axes=(-2, -1)) * (naz * pad * nel * pad)
    az = np.deg2rad(eadf.az_start_deg + np.arange(naz * pad) * eadf.az_step_deg / pad)
    el = np.deg2rad(eadf.el_start_deg + np.arange(nel * pad) * eadf.el_step_deg / pad)
    return dense, az, el


class TestSynthPattern:
    def test_half_power_at_hpbw(self):
        geo = ss.ArrayGeometry.single()
        grid = ss.synth_pattern(geo, hpbw_az_deg=85.0, hpbw_el_deg=50.0)
        az = grid.az_deg
        el0 = np.argmin(np.abs(grid.el_deg))
        cut = np.abs(grid.gains[0, 0, 0, :, el0]) ** 2
        peak = cut[np.argmin(np.abs(az))]
        # half power falls between the grid nodes bracketing +-42.5 deg
        below = cut[az == 44.0][0] / peak
        above = cut[az == 42.0][0] / peak
        assert below < 0.5 < above

    def test_isotropic_sentinel(self):
        geo = ss.ArrayGeometry.single()
        grid = ss.synth_pattern(geo, hpbw_az_deg=180.0, hpbw_el_deg=180.0)
        np.testing.assert_allclose(np.abs(grid.gains[0, 0, 0]), 1.0, atol=1e-12)

    def test_origin_element_has_zero_phase(self):
        geo = ss.ArrayGeometry.single()
        grid = ss.synth_pattern(geo)
        np.testing.assert_allclose(np.angle(grid.gains[0, 0, 0]), 0.0, atol=1e-12)

    def test_cross_pol_level(self):
        geo = ss.ArrayGeometry.single()
        grid = ss.synth_pattern(geo, xpd_db=30.0)
        co = np.abs(grid.gains[0, 0, 0])
        xp = np.abs(grid.gains[0, 1, 0])
        np.testing.assert_allclose(xp, co * 10 ** (-30 / 20), atol=1e-12)

    def test_rejects_bad_hpbw(self):
        with pytest.raises(ValueError):
            ss.synth_pattern(ss.ArrayGeometry.single(), hpbw_az_deg=0.0)
        with pytest.raises(ValueError):
            ss.synth_pattern(ss.ArrayGeometry.single(), hpbw_az_deg=200.0)


class TestGeometry:
    def test_paper_arrays_have_feed_counts(self):
        assert ss.ArrayGeometry.panel_rectangle().n_elements == 128
        assert ss.ArrayGeometry.octagon().n_elements == 256

    def test_octagon_orientations_face_outward(self):
        geo = ss.ArrayGeometry.octagon()
        center_dirs = geo.positions[:, :2]
        dots = np.sum(center_dirs * geo.orientations[:, :2], axis=1)
        assert np.all(dots > 0)

    def test_rejects_non_unit_orientation(self):
        with pytest.raises(ValueError):
            ss.ArrayGeometry(np.zeros((1, 3)), np.array([[2.0, 0, 0]]))


class TestEadf:
    def test_isotropic_gives_single_dc_coefficient(self):
        geo = ss.ArrayGeometry.single()
        grid = ss.synth_pattern(geo, hpbw_az_deg=180.0, hpbw_el_deg=180.0)
        eadf = ss.compute_eadf(grid)
        c = eadf.coefficients[0, 0, 0]
        dc = c[eadf.modes_az == 0][:, eadf.modes_el == 0][0, 0]
        assert abs(dc - 1.0) < 1e-12
        others = np.abs(c).sum() - abs(dc)
        assert others < 1e-9

    def test_full_truncation_roundtrip_below_minus_40db(self, desk_eadf_rx):
        assert desk_eadf_rx.reconstruction_error_db <= -40.0

    def test_hard_truncation_error_is_reported(self):
        geo = ss.ArrayGeometry.single()
        grid = ss.synth_pattern(geo, hpbw_az_deg=85.0, hpbw_el_deg=50.0)
        eadf = ss.compute_eadf(grid, truncation=(1, 1))
        assert eadf.reconstruction_error_db > -10.0

    def test_node_exactness(self):
        geo = ss.ArrayGeometry.upa(2, 1, LAM / 2)
        grid = ss.synth_pattern(geo)
        eadf = ss.compute_eadf(grid)
        az = np.deg2rad(grid.az_deg)
        el = np.deg2rad(grid.el_deg)
        rec = eadf.response_grid(az, el, 28e9)
        err = np.abs(rec - grid.gains[:, :, 0]).max()
        assert err < 1e-9

    def test_between_nodes_matches_fft_oracle(self, desk_eadf_rx):
        dense, az, el = padded_fft_oracle(desk_eadf_rx, pad=10)
        sel_a = [37, 411, 905, 1333]
        sel_e = [21, 217, 410, 533]
        got = desk_eadf_rx.response(az[sel_a], el[sel_e], 28e9)
        want = dense[:, :, 0][:, :, sel_a, sel_e]
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_broadside_is_scan_maximum(self, desk_eadf_rx):
        az = np.deg2rad(np.arange(-90, 91, 3.0))
        resp = desk_eadf_rx.response(az, np.zeros_like(az), 28e9)
        power = np.abs(resp[:, 0, :]) ** 2    # co-pol row
        total = power.sum(axis=0)
        assert np.argmax(total) == np.argmin(np.abs(az))

    def test_hermitian_symmetry_of_real_pattern(self):
        geo = ss.ArrayGeometry.single()    # zero position: real cosine pattern
        grid = ss.synth_pattern(geo)
        eadf = ss.compute_eadf(grid)
        c = eadf.coefficients[0, 0, 0]
        ia = {m: i for i, m in enumerate(eadf.modes_az)}
        ie = {m: i for i, m in enumerate(eadf.modes_el)}
        for ka in (-3, 0, 5):
            for ke in (-2, 1, 4):
                lhs = c[ia[ka], ie[ke]]
                rhs = np.conj(c[ia[-ka], ie[-ke]])
                assert abs(lhs - rhs) < 1e-12

    def test_geometry_phase_between_elements(self):
        geo = ss.ArrayGeometry.upa(2, 1, LAM / 2)
        eadf = ss.compute_eadf(ss.synth_pattern(geo))
        azq, elq = np.deg2rad(30.0), np.deg2rad(10.0)
        b = eadf.response(azq, elq, 28e9)[:, 0]
        u = np.array([np.cos(elq) * np.cos(azq), np.cos(elq) * np.sin(azq),
                      np.sin(elq)])
        dp = geo.positions[1] - geo.positions[0]
        want = 2 * np.pi * 28e9 / C0 * (dp @ u)
        got = np.angle(b[1] * np.conj(b[0]))
        err = abs((got - want + np.pi) % (2 * np.pi) - np.pi)
        assert err < 1e-6

    def test_derivatives_match_finite_differences(self, desk_eadf_rx):
        azq, elq = 0.31, -0.12
        b, daz, del_ = desk_eadf_rx.response_with_derivs(azq, elq, 28e9)
        h = 1e-6
        fd_az = (desk_eadf_rx.response(azq + h, elq, 28e9)
                 - desk_eadf_rx.response(azq - h, elq, 28e9)) / (2 * h)
        fd_el = (desk_eadf_rx.response(azq, elq + h, 28e9)
                 - desk_eadf_rx.response(azq, elq - h, 28e9)) / (2 * h)
        np.testing.assert_allclose(daz[..., 0], fd_az, atol=1e-5)
        np.testing.assert_allclose(del_[..., 0], fd_el, atol=1e-5)


class TestFrequencyHandling:
    def test_nearest_selection_and_band_check(self):
        geo = ss.ArrayGeometry.single()
        freqs = tuple(26e9 + 0.25e9 * np.arange(17))     # 26..30 GHz
        grid = ss.synth_pattern(geo, frequencies_hz=freqs)
        eadf = ss.compute_eadf(grid)
        a = eadf.response(0.0, 0.0, 28.0e9)
        b = eadf.response(0.0, 0.0, 28.1e9)              # nearest is still 28.0
        np.testing.assert_allclose(a, b)
        with pytest.raises(ValueError):
            eadf.response(0.0, 0.0, 40e9)

    def test_single_frequency_accepts_band_queries(self, desk_eadf_rx):
        desk_eadf_rx.response(0.0, 0.0, 27.5e9)
        desk_eadf_rx.response(0.0, 0.0, 28.5e9)


class TestCalibrationIo:
    def test_directory_round_trip(self, tmp_path):
        geo = ss.ArrayGeometry.upa(2, 2, LAM / 2)
        grid = ss.synth_pattern(geo, frequencies_hz=(27.75e9, 28.0e9))
        d = ss.save_calibration(grid, tmp_path / "cal")
        back = ss.load_calibration(d)
        assert back.frequencies_hz == grid.frequencies_hz
        assert back.n_az == grid.n_az and back.n_el == grid.n_el
        np.testing.assert_allclose(back.gains, grid.gains, atol=1e-5)

    def test_eadf_cache_round_trip(self, tmp_path, desk_eadf_rx):
        path = ss.save_eadf_cache(desk_eadf_rx, tmp_path / "eadf.npz")
        back = ss.load_eadf_cache(path)
        np.testing.assert_array_equal(back.coefficients, desk_eadf_rx.coefficients)
        assert back.source_checksum == desk_eadf_rx.source_checksum
        q = back.response(0.2, 0.1, 28e9)
        np.testing.assert_allclose(q, desk_eadf_rx.response(0.2, 0.1, 28e9))
