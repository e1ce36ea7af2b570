"""Separation metrics on time-domain signals."""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve

CAP_DB = 60.0


def _prep(est, ref):
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.ndim != 1 or est.shape != ref.shape:
        raise ValueError(f"expected two equal-length mono signals, got {est.shape} and {ref.shape}")
    if not np.any(ref):
        raise ValueError("reference signal is all zeros")
    return est, ref


def _ratio_db(target_energy: float, error_energy: float) -> float:
    if target_energy <= 0:  # silent or orthogonal estimate, even when the error is also 0
        return -CAP_DB
    if error_energy <= 0:
        return CAP_DB
    return float(np.clip(10 * np.log10(target_energy / error_energy), -CAP_DB, CAP_DB))


def si_sdr(est, ref) -> float:
    """Scale-invariant SDR in dB, clipped to +-60 dB."""
    est, ref = _prep(est, ref)
    target = (est @ ref) / (ref @ ref) * ref
    err = est - target
    return _ratio_db(target @ target, err @ err)


def _delay_gram(ref: np.ndarray, taps: int) -> np.ndarray:
    """D^T D for D[t, k] = ref[t - k] truncated to the signal length."""
    n = ref.size
    gram = np.empty((taps, taps))
    for lag in range(taps):
        cs = np.cumsum(ref[:n - lag] * ref[lag:])
        rows = np.arange(lag, taps)
        vals = cs[n - 1 - rows]
        gram[rows, rows - lag] = vals
        gram[rows - lag, rows] = vals
    return gram


def sdr_proj(est, ref, filter_taps: int = 512) -> float:
    """SDR allowing a causal FIR distortion of the reference.

    The target is the least-squares projection of ``est`` onto the delayed
    copies ``ref(n - k)``, k = 0 .. filter_taps - 1 (truncated to the signal
    length). With one tap this is exactly :func:`si_sdr`.
    """
    est, ref = _prep(est, ref)
    n = ref.size
    if filter_taps < 1 or n < filter_taps:
        raise ValueError(f"filter_taps must be in [1, {n}], got {filter_taps}")
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    cross = np.fft.irfft(np.fft.rfft(est, nfft) * np.conj(np.fft.rfft(ref, nfft)), nfft)[:filter_taps]
    h = solve(_delay_gram(ref, filter_taps), cross, assume_a="pos")
    target = np.convolve(ref, h)[:n]
    err = est - target
    return _ratio_db(target @ target, err @ err)
