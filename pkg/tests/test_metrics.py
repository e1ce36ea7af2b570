import numpy as np
import pytest

from m2m.metrics import CAP_DB, sdr_proj, si_sdr


def test_si_sdr_exact_and_scaled():
    ref = np.random.default_rng(0).normal(size=4000)
    assert si_sdr(ref, ref) == CAP_DB
    assert si_sdr(3 * ref, ref) == CAP_DB


def test_si_sdr_orthogonal_noise():
    rng = np.random.default_rng(1)
    ref = rng.normal(size=8000)
    noise = rng.normal(size=8000)
    noise -= (noise @ ref) / (ref @ ref) * ref
    noise *= np.linalg.norm(ref) / 10 / np.linalg.norm(noise)
    assert abs(si_sdr(ref + noise, ref) - 20.0) < 0.1


def test_zero_reference_rejected():
    with pytest.raises(ValueError):
        si_sdr(np.ones(10), np.zeros(10))
    with pytest.raises(ValueError):
        sdr_proj(np.ones(10), np.zeros(10), 2)


def test_sdr_proj_delay_absorbed():
    ref = np.random.default_rng(2).normal(size=6000)
    est = np.concatenate([np.zeros(37), ref[:-37]])
    assert sdr_proj(est, ref, 64) == CAP_DB
    assert si_sdr(est, ref) < 0


def test_sdr_proj_single_tap_is_si_sdr():
    rng = np.random.default_rng(3)
    ref, est = rng.normal(size=(2, 3000))
    est += ref
    assert abs(sdr_proj(est, ref, 1) - si_sdr(est, ref)) < 1e-9


def test_sdr_proj_matches_dense_lstsq():
    rng = np.random.default_rng(4)
    n, taps = 700, 12
    ref, est = rng.normal(size=(2, n))
    est += np.convolve(ref, rng.normal(size=5))[:n]
    D = np.zeros((n, taps))
    for k in range(taps):
        D[k:, k] = ref[:n - k]
    h, *_ = np.linalg.lstsq(D, est, rcond=None)
    target = D @ h
    expect = 10 * np.log10(target @ target / np.sum((est - target) ** 2))
    assert abs(sdr_proj(est, ref, taps) - expect) < 1e-8


def test_silent_estimate_scores_floor():
    ref = np.random.default_rng(4).normal(size=500)
    assert si_sdr(np.zeros(500), ref) == -60.0
    assert sdr_proj(np.zeros(500), ref, 8) == -60.0
