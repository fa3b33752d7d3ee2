import numpy as np
import pytest

import soundersim as ss
from soundersim.sounder import hann_window
from conftest import desk_tones, desk_schedule, desk_waveform


def windowed_ifft_oracle(freqs, tau, m_f):
    """Direct evaluation of the windowed delay transform for one path."""
    w = np.sin(np.pi * (np.arange(m_f) + 0.5) / m_f) ** 2
    h = w * np.exp(-2j * np.pi * freqs * tau)
    return np.fft.ifft(h)


class TestLinkBudget:
    def test_sensitivity_paper_value(self):
        assert ss.receiver_sensitivity(ss.LinkBudget()) == -79.0

    def test_sensitivity_2ghz(self):
        b = ss.LinkBudget(bandwidth_hz=2e9)
        assert ss.receiver_sensitivity(b) == pytest.approx(-75.99, abs=0.005)

    def test_thermal_floor(self):
        b = ss.LinkBudget(noise_figure_db=0.0, bandwidth_hz=1.0)
        assert ss.receiver_sensitivity(b) == -174.0

    def test_report_paper_numbers(self):
        rep = ss.link_budget_report(ss.LinkBudget())
        assert rep["sensitivity_dbm"] == -79.0
        assert rep["isotropic_sensitivity_dbm"] == pytest.approx(-109.08, abs=1e-9)
        assert rep["max_pathloss_db"] == pytest.approx(152.08, abs=0.01)
        assert rep["dynamic_range_db"] == 75.0

    def test_rejects_bad_bandwidth(self):
        with pytest.raises(ValueError):
            ss.LinkBudget(bandwidth_hz=0.0)


class TestAcquire:
    def test_flat_channel_returns_window_kernel(self, single_iso_eadf):
        m_f = 256
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f),
                                paths=[ss.SpecularPath.co_pol(0.0, 0.0, 0.0, 1.0)])
        sch = desk_schedule(n_tx=1, n_rx=1)
        cir = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                         single_iso_eadf)
        h = cir.values[0, :, 0, 0]
        # the half-shifted Hann kernel: coherent-gain peak plus two known taps
        assert abs(h[0] - 0.5) <= 1e-6
        assert abs(abs(h[1]) - 0.25) <= 1e-6
        assert abs(abs(h[-1]) - 0.25) <= 1e-6
        assert np.abs(h[2:-1]).max() <= 1e-6

    def test_offgrid_path_matches_windowed_ifft_oracle(self, single_iso_eadf):
        m_f = 256
        freqs = desk_tones(m_f)
        tau = 10e-9
        scene = ss.ChannelScene(frequencies_hz=freqs,
                                paths=[ss.SpecularPath.co_pol(tau, 0.0, 0.0, 1.0)])
        sch = desk_schedule(n_tx=1, n_rx=1)
        cir = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                         single_iso_eadf)
        oracle = windowed_ifft_oracle(freqs, tau, m_f)
        np.testing.assert_allclose(cir.values[0, :, 0, 0], oracle, atol=1e-9)
        prof = np.abs(cir.values[0, :, 0, 0]) ** 2
        assert np.argmax(prof) == int(round(tau / cir.delay_step_s))

    def test_half_bin_path_sidelobes_match_hann_level(self, single_iso_eadf):
        # a delay half-way between bins exposes the window's first sidelobe
        m_f = 256
        freqs = desk_tones(m_f)
        tau = 1.5 / (m_f * 5e5)
        scene = ss.ChannelScene(frequencies_hz=freqs,
                                paths=[ss.SpecularPath.co_pol(tau, 0.0, 0.0, 1.0)])
        sch = desk_schedule(n_tx=1, n_rx=1)
        cir = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                         single_iso_eadf)
        p = np.abs(cir.values[0, :, 0, 0]) ** 2
        pk = int(np.argmax(p))
        mask = np.ones(m_f, bool)
        mask[[pk - 2, pk - 1, pk, pk + 1, pk + 2]] = False
        psl = 10 * np.log10(p[pk] / p[mask].max())
        assert psl == pytest.approx(31.5, abs=1.0)

    def test_averaging_lowers_noise_floor_6db(self, single_iso_eadf):
        m_f = 64
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f), paths=[],
                                dense=ss.DenseProfile(gamma1=0.0))
        noise = ss.NoiseSpec(mode="noise_power", noise_power=1.0)
        floors = []
        for m_avg in (1, 4):
            frame = ss.FrameSpec(n_core=m_avg)
            sch = desk_schedule(n_tx=1, n_rx=1, frame=frame)
            acc = 0.0
            for trial in range(100):
                cir = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                                 single_iso_eadf, noise, seed=trial)
                acc += np.mean(np.abs(cir.values) ** 2)
            floors.append(acc / 100)
        drop_db = 10 * np.log10(floors[0] / floors[1])
        assert drop_db == pytest.approx(6.02, abs=0.5)

    def test_noise_only_floor_level(self, single_iso_eadf):
        m_f = 128
        sigma2 = 0.5
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f), paths=[],
                                dense=ss.DenseProfile(gamma1=0.0))
        sch = desk_schedule(n_tx=1, n_rx=1, frame=ss.FrameSpec(n_core=1))
        acc = []
        for trial in range(10):
            cir = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                             single_iso_eadf,
                             ss.NoiseSpec(mode="noise_power", noise_power=sigma2),
                             seed=trial)
            acc.append(np.abs(cir.values) ** 2)
        mean_power = np.mean(acc)          # over 1280 bins total
        w = hann_window(m_f)
        want = sigma2 * np.sum(w**2) / m_f**2
        assert 10 * np.log10(mean_power / want) == pytest.approx(0.0, abs=0.3)

    def test_averaging_is_unbiased(self, single_iso_eadf):
        m_f = 32
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f),
                                paths=[ss.SpecularPath.co_pol(5e-9, 0.0, 0.0, 1.0)])
        sch = desk_schedule(n_tx=1, n_rx=1)
        clean = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                           single_iso_eadf)
        noise = ss.NoiseSpec(mode="noise_power", noise_power=0.25)
        trials = np.stack([
            ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                       single_iso_eadf, noise, seed=t).values
            for t in range(200)
        ])
        mean = trials.mean(axis=0)
        # 3 sigma of the Monte-Carlo mean per complex bin
        w = hann_window(m_f)
        sigma_bin = np.sqrt(0.25 / 4 * np.sum(w**2) / m_f**2 / 200)
        assert np.abs(mean - clean.values).max() <= 4 * sigma_bin

    def test_parseval_window_compensated(self, single_iso_eadf):
        m_f = 128
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f),
                                paths=[ss.SpecularPath.co_pol(22e-9, 0.0, 0.0, 0.7)])
        sch = desk_schedule(n_tx=1, n_rx=1)
        cir = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                         single_iso_eadf)
        h = cir.values[0, :, 0, 0]
        w = hann_window(m_f)
        freq_power = np.sum(np.abs(w * np.exp(-2j * np.pi * desk_tones(m_f) * 22e-9)
                                   * 0.7) ** 2)
        delay_power = np.sum(np.abs(h) ** 2) * m_f
        assert abs(delay_power - freq_power) <= 1e-9 * freq_power

    def test_saturation_flagged(self, single_iso_eadf):
        m_f = 16
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f),
                                paths=[ss.SpecularPath.co_pol(0.0, 0.0, 0.0, 1.0)])
        sch = desk_schedule(n_tx=1, n_rx=1)
        noise = ss.NoiseSpec(mode="physical", budget=ss.LinkBudget(),
                             pathloss_db=40.0)
        cir = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                         single_iso_eadf, noise)
        assert cir.saturated

    def test_lo_phase_jitter_rotates_snapshots(self, single_iso_eadf):
        m_f = 32
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f),
                                paths=[ss.SpecularPath.co_pol(0.0, 0.0, 0.0, 1.0)])
        sch = desk_schedule(n_tx=1, n_rx=1)
        noise = ss.NoiseSpec(mode="off", lo_phase_jitter_rad=0.5)
        cir = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                         single_iso_eadf, noise, n_snapshots=2, seed=1)
        a, b = cir.values[0, :, 0, 0], cir.values[1, :, 0, 0]
        np.testing.assert_allclose(np.abs(a), np.abs(b), atol=1e-12)
        rot = np.angle(np.vdot(a, b))
        assert abs(rot) > 1e-3          # snapshots differ by a phase only

    def test_dimension_mismatch_rejected(self, single_iso_eadf):
        scene = ss.ChannelScene(frequencies_hz=desk_tones(32),
                                paths=[ss.SpecularPath.co_pol(0.0, 0.0, 0.0, 1.0)])
        sch = desk_schedule(n_tx=2, n_rx=2)
        with pytest.raises(ValueError):
            ss.acquire(scene, sch, desk_waveform(32), single_iso_eadf,
                       single_iso_eadf)
        sch1 = desk_schedule(n_tx=1, n_rx=1)
        with pytest.raises(ValueError):
            ss.acquire(scene, sch1, desk_waveform(64), single_iso_eadf,
                       single_iso_eadf)


class TestPdp:
    def _small_cir(self, single_iso_eadf, paths, **kw):
        m_f = 64
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f), paths=paths,
                                dense=None if paths else ss.DenseProfile(gamma1=0))
        sch = desk_schedule(n_tx=1, n_rx=1)
        return ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                          single_iso_eadf, **kw)

    def test_zero_cir_zero_pdp(self, single_iso_eadf):
        cir = self._small_cir(single_iso_eadf, [])
        assert np.all(ss.pdp(cir) == 0)

    def test_impulse(self, single_iso_eadf):
        cir = self._small_cir(single_iso_eadf, [])
        cir.values[0, 0, 0, 0] = 1.0
        prof = ss.pdp(cir)
        assert prof[0] == 1.0 and np.all(prof[1:] == 0)

    def test_static_snapshot_average_equals_single(self, single_iso_eadf):
        m_f = 64
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f),
                                paths=[ss.SpecularPath.co_pol(30e-9, 0.0, 0.0, 1.0)])
        sch = desk_schedule(n_tx=1, n_rx=1)
        cir = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                         single_iso_eadf, n_snapshots=5)
        np.testing.assert_allclose(ss.pdp(cir), ss.pdp(cir, snapshots=[2]),
                                   atol=1e-15)

    def test_empty_selection_rejected(self, single_iso_eadf):
        cir = self._small_cir(single_iso_eadf, [])
        with pytest.raises(ValueError):
            ss.pdp(cir, snapshots=[])


class TestPas:
    def test_single_broadside_path_peaks_at_origin(self, desk_eadf_tx, desk_eadf_rx):
        m_f = 64
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f),
                                paths=[ss.SpecularPath.co_pol(10e-9, 0.0, 0.0, 1.0)])
        sch = desk_schedule()
        cir = ss.acquire(scene, sch, desk_waveform(m_f), desk_eadf_tx, desk_eadf_rx)
        az = np.deg2rad(np.arange(-80, 81, 2.0))
        el = np.deg2rad(np.arange(-40, 41, 5.0))
        spec = ss.pas(cir, desk_eadf_rx, az, el)
        i, j = np.unravel_index(np.argmax(spec), spec.shape)
        assert abs(az[i]) < 1e-9 and abs(el[j]) < 1e-9
        assert spec.max() == 1.0

    def test_two_paths_two_maxima(self):
        from conftest import LAMBDA_28
        e8 = ss.desk_eadf(ss.ArrayGeometry.upa(8, 1, LAMBDA_28 / 2))
        m_f = 64
        scene = ss.ChannelScene(
            frequencies_hz=desk_tones(m_f),
            paths=[ss.SpecularPath.co_pol(10e-9, np.deg2rad(-30), 0.0, 1.0),
                   ss.SpecularPath.co_pol(34e-9, np.deg2rad(30), 0.0, 1.0)])
        sch = desk_schedule()
        cir = ss.acquire(scene, sch, desk_waveform(m_f), e8, e8)
        az = np.deg2rad(np.arange(-80, 81, 2.0))
        el = np.array([0.0])
        cut = ss.pas(cir, e8, az, el)[:, 0]
        import scipy.signal
        peaks, _ = scipy.signal.find_peaks(cut)
        top2 = sorted(peaks, key=lambda i: -cut[i])[:2]
        found = sorted(np.rad2deg(az[top2]))
        # within one 2-degree grid cell of the injected azimuths
        assert abs(found[0] + 30) <= 2.0 and abs(found[1] - 30) <= 2.0

    def test_dense_only_sector_flatness(self, iso_eadf_8):
        # uniform diffuse field: beamformed spectrum statistically flat
        m_f = 32
        scene = ss.ChannelScene(
            frequencies_hz=desk_tones(m_f), paths=[],
            dense=ss.DenseProfile(tau_d_s=0.0, beta_d=0.1, gamma1=1.0))
        sch = desk_schedule()
        az = np.deg2rad(np.arange(-60, 61, 5.0))
        el = np.array([0.0])
        acc = np.zeros(az.size)
        for seed in range(100):
            cir = ss.acquire(scene, sch, desk_waveform(m_f), iso_eadf_8,
                             iso_eadf_8, n_snapshots=1, seed=seed)
            spec = ss.pas(cir, iso_eadf_8, az, el)
            acc += spec[:, 0]
        acc /= 100
        spread_db = 10 * np.log10(acc.max() / acc.min())
        assert spread_db <= 3.0

    def test_empty_grid_rejected(self, iso_eadf_8, single_iso_eadf):
        m_f = 16
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f),
                                paths=[ss.SpecularPath.co_pol(0, 0, 0, 1.0)])
        sch = desk_schedule(n_tx=1, n_rx=1)
        cir = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                         single_iso_eadf)
        with pytest.raises(ValueError):
            ss.pas(cir, single_iso_eadf, np.array([]), np.array([0.0]))


class TestCirIo:
    def test_round_trip(self, tmp_path, single_iso_eadf):
        m_f = 32
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f),
                                paths=[ss.SpecularPath.co_pol(9e-9, 0, 0, 0.8)])
        sch = desk_schedule(n_tx=1, n_rx=1)
        cir = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                         single_iso_eadf, n_snapshots=2)
        bin_path, meta_path = ss.save_cir(cir, tmp_path / "cir.bin")
        back = ss.load_cir(bin_path, meta_path)
        assert back.values.shape == cir.values.shape
        np.testing.assert_allclose(back.values, cir.values, atol=1e-6)
        assert back.delay_step_s == cir.delay_step_s
        assert back.schedule_checksum == cir.schedule_checksum

    def test_payload_size_check(self, tmp_path, single_iso_eadf):
        m_f = 16
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f),
                                paths=[ss.SpecularPath.co_pol(0, 0, 0, 1.0)])
        sch = desk_schedule(n_tx=1, n_rx=1)
        cir = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                         single_iso_eadf)
        bin_path, meta_path = ss.save_cir(cir, tmp_path / "cir.bin")
        with open(bin_path, "ab") as f:
            f.write(b"\x00" * 8)
        with pytest.raises(ValueError):
            ss.load_cir(bin_path, meta_path)

    def test_csv_exports(self, tmp_path, single_iso_eadf):
        m_f = 32
        scene = ss.ChannelScene(frequencies_hz=desk_tones(m_f),
                                paths=[ss.SpecularPath.co_pol(15e-9, 0, 0, 1.0)])
        sch = desk_schedule(n_tx=1, n_rx=1)
        cir = ss.acquire(scene, sch, desk_waveform(m_f), single_iso_eadf,
                         single_iso_eadf)
        p = ss.pdp_to_csv(cir, tmp_path / "pdp.csv")
        rows = open(p).read().strip().splitlines()
        assert rows[0] == "delay_ns,power_db"
        assert len(rows) == m_f + 1
        az = np.deg2rad(np.arange(-10, 11, 10.0))
        el = np.deg2rad(np.array([0.0]))
        spec = ss.pas(cir, single_iso_eadf, az, el)
        p2 = ss.pas_to_csv(spec, az, el, tmp_path / "pas.csv")
        rows2 = open(p2).read().strip().splitlines()
        assert rows2[0] == "az_deg,el_deg,power_db"
        assert len(rows2) == az.size * el.size + 1
