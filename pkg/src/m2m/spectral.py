"""STFT / iSTFT and WAV helpers shared by every other module.

Frames are zero-padded by ``window_len - hop`` on both sides (plus whatever is
needed on the right to land on a frame boundary), so every input sample is
covered by the same number of full windows. Synthesis is overlap-add with the
dual window, i.e. the analysis window divided by the local sum of squared
windows, which makes ``istft(stft(x)) == x`` up to rounding.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile


class WindowKind(str, enum.Enum):
    SQRT_HANN = "sqrt_hann"
    HANN = "hann"


@dataclass(frozen=True)
class StftConfig:
    sample_rate_hz: int = 8000
    window_len_samples: int = 256
    hop_samples: int = 64
    window_kind: WindowKind = WindowKind.SQRT_HANN
    fft_len_samples: int = 256

    def __post_init__(self):
        object.__setattr__(self, "window_kind", WindowKind(self.window_kind))
        for name in ("sample_rate_hz", "window_len_samples", "hop_samples", "fft_len_samples"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.fft_len_samples < self.window_len_samples:
            raise ValueError("fft_len_samples must be >= window_len_samples")
        if self.window_len_samples % self.hop_samples:
            raise ValueError("hop_samples must divide window_len_samples")

    @property
    def num_freqs(self) -> int:
        return self.fft_len_samples // 2 + 1

    @property
    def pad(self) -> int:
        return self.window_len_samples - self.hop_samples

    def num_frames(self, num_samples: int) -> int:
        """Frame count for a signal of ``num_samples`` samples."""
        if num_samples < 1:
            raise ValueError("signal must contain at least one sample")
        span = num_samples + 2 * self.pad - self.window_len_samples
        return 1 + -(-span // self.hop_samples)

    def window(self) -> np.ndarray:
        n = self.window_len_samples
        hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
        if self.window_kind is WindowKind.SQRT_HANN:
            return np.sqrt(hann)
        return hann

    def to_dict(self) -> dict:
        return {
            "sample_rate_hz": self.sample_rate_hz,
            "window_len_samples": self.window_len_samples,
            "hop_samples": self.hop_samples,
            "window_kind": self.window_kind.value,
            "fft_len_samples": self.fft_len_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StftConfig":
        return cls(**d)


@dataclass(frozen=True)
class ComplexSpectrogram:
    """T x F complex spectrogram of one channel, tied to the config that made it."""

    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    num_samples: int | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[1] != self.config.num_freqs:
            raise ValueError(
                f"expected T x {self.config.num_freqs} data, got shape {data.shape}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("spectrogram contains non-finite values")
        data = data.astype(np.complex128, copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int]:
        return self.data.shape

    def __add__(self, other: "ComplexSpectrogram") -> "ComplexSpectrogram":
        if other.config != self.config or other.dims != self.dims:
            raise ValueError("cannot add spectrograms with different configs or dims")
        return ComplexSpectrogram(self.data + other.data, self.config, self.num_samples)

    def scale(self, s: complex) -> "ComplexSpectrogram":
        return ComplexSpectrogram(self.data * s, self.config, self.num_samples)


def stft_array(x: np.ndarray, config: StftConfig = StftConfig()) -> np.ndarray:
    """Vectorised STFT over the last axis.

    x: (..., L) real. Returns (..., T, F) complex128.
    """
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[-1]
    if length < 1:
        raise ValueError("cannot take the STFT of an empty signal")
    win, hop = config.window_len_samples, config.hop_samples
    frames = config.num_frames(length)
    right = (frames - 1) * hop + win - length - config.pad
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(config.pad, right)])
    idx = np.arange(frames)[:, None] * hop + np.arange(win)[None, :]
    segs = padded[..., idx] * config.window()
    return np.fft.rfft(segs, n=config.fft_len_samples, axis=-1)


def istft_array(spec: np.ndarray, length: int, config: StftConfig = StftConfig()) -> np.ndarray:
    """Inverse of :func:`stft_array`; ``spec`` is (..., T, F)."""
    spec = np.asarray(spec)
    if spec.shape[-1] != config.num_freqs:
        raise ValueError("frequency axis does not match config")
    frames = spec.shape[-2]
    if config.num_frames(length) != frames:
        raise ValueError(f"{frames} frames cannot come from a {length}-sample signal")
    win, hop = config.window_len_samples, config.hop_samples
    w = config.window()
    segs = np.fft.irfft(spec, n=config.fft_len_samples, axis=-1)[..., :win] * w
    total = (frames - 1) * hop + win
    out = np.zeros(spec.shape[:-2] + (total,))
    norm = np.zeros(total)
    for t in range(frames):
        out[..., t * hop:t * hop + win] += segs[..., t, :]
        norm[t * hop:t * hop + win] += w * w
    keep = slice(config.pad, config.pad + length)
    # every kept sample is covered by win/hop full windows, so norm > 0 there
    return out[..., keep] / norm[keep]


def stft(signal, config: StftConfig = StftConfig()) -> ComplexSpectrogram:
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a mono signal")
    return ComplexSpectrogram(stft_array(x, config), config, x.shape[0])


def istft(spec: ComplexSpectrogram, config: StftConfig | None = None,
          length: int | None = None) -> np.ndarray:
    if config is not None and config != spec.config:
        raise ValueError("config does not match the one the spectrogram was made with")
    if length is None:
        length = spec.num_samples
    if length is None:
        # frame count alone leaves the tail ambiguous; take the longest consistent length
        length = (spec.dims[0] - 1) * spec.config.hop_samples + spec.config.window_len_samples \
            - 2 * spec.config.pad
    return istft_array(spec.data, length, spec.config)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono WAV, PCM normalised to [-1, 1). Returns (samples, rate)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing WAV file: {path}")
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = (data.astype(np.float64) / 2 ** 31).astype(np.float32)
    elif data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    elif data.dtype not in (np.float32, np.float64):
        raise ValueError(f"{path}: unsupported sample type {data.dtype}")
    return data, int(rate)


def write_wav(path, samples: np.ndarray, rate: int, pcm16: bool = False) -> None:
    samples = np.asarray(samples)
    if samples.ndim != 1:
        raise ValueError("write_wav expects a mono signal")
    if pcm16:
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    wavfile.write(Path(path), int(rate), data)
