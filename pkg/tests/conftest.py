"""Shared desk-scale fixtures: arrays, schedules, and scene builders."""

import numpy as np
import pytest

import soundersim as ss

LAMBDA_28 = 3e8 / 28e9


def desk_tones(m_f: int = 256, spacing: float = 5e5) -> np.ndarray:
    """Sounding tone frequencies centered on 28 GHz."""
    return 28e9 + (np.arange(m_f) - (m_f - 1) / 2) * spacing


@pytest.fixture(scope="session")
def desk_eadf_tx():
    return ss.desk_eadf(ss.ArrayGeometry.upa(4, 2, LAMBDA_28 / 2))


@pytest.fixture(scope="session")
def desk_eadf_rx():
    return ss.desk_eadf(ss.ArrayGeometry.upa(4, 2, LAMBDA_28 / 2))


@pytest.fixture(scope="session")
def iso_eadf_8():
    return ss.desk_eadf(ss.ArrayGeometry.upa(4, 2, LAMBDA_28 / 2), isotropic=True)


@pytest.fixture(scope="session")
def single_iso_eadf():
    return ss.desk_eadf(ss.ArrayGeometry.single(), isotropic=True)


@pytest.fixture(scope="session")
def frame():
    return ss.FrameSpec()


def desk_schedule(seed=0, n_tx=8, n_rx=8, mode="pseudo_random", frame=None):
    cb = ss.gen_codebook(seed, n_tx, n_rx, mode=mode)
    return ss.snapshot_timing(cb, frame or ss.FrameSpec())


def desk_waveform(m_f=256):
    return ss.gen_multitone(ss.ToneGrid(m_f), 1, phase_rule="zadoff_chu_quadratic")
