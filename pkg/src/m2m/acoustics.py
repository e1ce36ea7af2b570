"""Paired close-talk / far-field scene simulation.

Shoebox image-source RIRs, pseudo-speech sources, and the bookkeeping that
keeps every mixture equal to the sum of its images plus noise.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import fftconvolve, lfilter

SPEED_OF_SOUND = 343.0
SINC_HALF_WIDTH = 16  # interpolator half-length (samples) for early reflections
LATE_SINC_HALF_WIDTH = 4
EARLY_REFLECTIONS_S = 0.03


@dataclass(frozen=True)
class SceneSpec:
    room_dims_m: tuple[float, float, float] = (6.0, 5.0, 3.0)
    t60_s: float = 0.3
    num_speakers: int = 2
    num_farfield_mics: int = 6
    array_diameter_m: float = 0.20
    speaker_to_array_dist_m: tuple[float, ...] = (1.5, 1.5)
    closetalk_dist_m: tuple[float, ...] = (0.2, 0.2)
    noise_snr_db: float | None = 25.0  # None disables noise
    rng_seed: int = 0
    sample_rate_hz: int = 8000

    def __post_init__(self):
        object.__setattr__(self, "room_dims_m", tuple(float(v) for v in self.room_dims_m))
        object.__setattr__(self, "speaker_to_array_dist_m",
                           tuple(float(v) for v in self.speaker_to_array_dist_m))
        object.__setattr__(self, "closetalk_dist_m", tuple(float(v) for v in self.closetalk_dist_m))
        if len(self.room_dims_m) != 3 or min(self.room_dims_m) <= 0:
            raise ValueError("room_dims_m must be three positive lengths")
        if not 0.2 <= self.t60_s <= 0.5:
            raise ValueError(f"t60_s must lie in [0.2, 0.5], got {self.t60_s}")
        if self.num_speakers < 1 or self.num_farfield_mics < 1:
            raise ValueError("need at least one speaker and one far-field mic")
        if len(self.speaker_to_array_dist_m) != self.num_speakers:
            raise ValueError("one speaker-to-array distance per speaker")
        if len(self.closetalk_dist_m) != self.num_speakers:
            raise ValueError("one close-talk distance per speaker")
        if any(not 1.0 <= d <= 2.0 for d in self.speaker_to_array_dist_m):
            raise ValueError("speaker_to_array_dist_m must lie in [1.0, 2.0]")
        if any(not 0.10 <= d <= 0.30 for d in self.closetalk_dist_m):
            raise ValueError("closetalk_dist_m must lie in [0.10, 0.30]")
        if self.noise_snr_db is not None and not 20.0 <= self.noise_snr_db <= 30.0:
            raise ValueError("noise_snr_db must lie in [20, 30] (or be None)")
        if self.array_diameter_m <= 0:
            raise ValueError("array_diameter_m must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["room_dims_m"] = list(self.room_dims_m)
        d["speaker_to_array_dist_m"] = list(self.speaker_to_array_dist_m)
        d["closetalk_dist_m"] = list(self.closetalk_dist_m)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass(frozen=True)
class Geometry:
    farfield_mics: np.ndarray   # (P, 3)
    closetalk_mics: np.ndarray  # (C, 3)
    speakers: np.ndarray        # (C, 3)

    @property
    def mics(self) -> np.ndarray:
        """All mics, far-field first then close-talk: (P + C, 3)."""
        return np.concatenate([self.farfield_mics, self.closetalk_mics])

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


@dataclass
class Scene:
    """One simulated utterance.

    Channel order everywhere is the P far-field mics followed by the C
    close-talk mics; close-talk mic d belongs to speaker d.
    """

    spec: SceneSpec
    geometry: Geometry
    dry: np.ndarray      # (C, N) float32
    rirs: np.ndarray     # (C, P + C, L)
    images: np.ndarray   # (C, P + C, N) float32
    noise: np.ndarray    # (P + C, N) float32
    mixtures: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mixtures = mix_images(self.images, self.noise)

    @property
    def num_speakers(self) -> int:
        return self.spec.num_speakers

    @property
    def num_farfield(self) -> int:
        return self.spec.num_farfield_mics

    @property
    def farfield_mix(self) -> np.ndarray:
        return self.mixtures[:self.num_farfield]

    @property
    def closetalk_mix(self) -> np.ndarray:
        return self.mixtures[self.num_farfield:]

    @property
    def num_samples(self) -> int:
        return self.dry.shape[-1]


def mix_images(images: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Mixture per mic as float32 sum of images (speaker order) plus noise."""
    out = np.zeros(noise.shape, dtype=np.float32)
    for c in range(images.shape[0]):
        out = out + images[c]
    return out + noise


def eyring_reflection(room_dims, t60: float, c: float = SPEED_OF_SOUND) -> float:
    """Wall reflection coefficient giving the requested T60 (Eyring's formula)."""
    lx, ly, lz = room_dims
    volume = lx * ly * lz
    surface = 2 * (lx * ly + ly * lz + lx * lz)
    absorption = 1.0 - math.exp(-24 * math.log(10) * volume / (c * surface * t60))
    return math.sqrt(1.0 - absorption)


def _inside(room_dims, pos, margin: float = 0.0) -> bool:
    pos = np.asarray(pos, dtype=np.float64)
    return bool(np.all(pos > margin) and np.all(pos < np.asarray(room_dims) - margin))


def _image_sources(room: np.ndarray, src: np.ndarray, max_dist: float):
    """Positions (K, 3) and reflection counts (K,) of all images that can reach max_dist."""
    grids = []
    for axis in range(3):
        n_max = int(math.ceil(max_dist / (2 * room[axis]))) + 1
        grids.append(np.arange(-n_max, n_max + 1))
    nx, ny, nz = np.meshgrid(*grids, indexing="ij")
    n = np.stack([nx.ravel(), ny.ravel(), nz.ravel()], axis=1)
    q = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    # image position = (1 - 2q) * src + 2 n L, reflection count = |n - q| + |n|
    img = (1 - 2 * q)[None] * src + 2 * n[:, None, :] * room
    order = (np.abs(n[:, None, :] - q[None]) + np.abs(n[:, None, :])).sum(-1)
    return img.reshape(-1, 3), order.ravel()


@lru_cache(maxsize=256)
def calibrated_reflection(room_dims: tuple, t60: float, fs: int = 8000,
                          c: float = SPEED_OF_SOUND) -> float:
    """Wall reflection coefficient whose image-source RIR measures the requested T60.

    The image-source decay is slower than Sabine/Eyring predict (grazing image
    paths reflect less often), so the coefficient is found by bisection on the
    Schroeder T60 of an energy-only image-source response between two fixed
    points of the room.
    """
    room = np.asarray(room_dims, dtype=np.float64)
    length = int(math.ceil(t60 * fs))
    src, mic = room * np.array([0.3, 0.4, 0.45]), room * np.array([0.65, 0.6, 0.5])
    img, order = _image_sources(room, src, length * c / fs)
    dist = np.linalg.norm(img - mic, axis=1)
    keep = dist < length * c / fs
    dist, order = dist[keep], order[keep]
    bins = np.floor(dist * fs / c).astype(np.int64)

    def measured(beta):
        energy = np.bincount(bins, weights=beta ** (2 * order) / dist ** 2, minlength=length)
        return schroeder_t60(np.sqrt(energy[:length]), fs)

    lo, hi = 1e-3, eyring_reflection(room, t60, c)
    if measured(hi) < t60:
        hi = 0.9999
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if measured(mid) < t60:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def simulate_rir(room_dims, t60: float | None, source_pos, mic_pos, fs: int = 8000,
                 c: float = SPEED_OF_SOUND, length: int | None = None,
                 reflection: float | None = None) -> np.ndarray:
    """Image-source RIR(s) of a shoebox room with uniform frequency-flat walls.

    mic_pos may be (3,) or (M, 3); the result is (L,) or (M, L) accordingly.
    ``reflection`` overrides the coefficient calibrated from ``t60``; 0 gives
    the anechoic direct path. Default length is T60 * fs samples.
    """
    room = np.asarray(room_dims, dtype=np.float64)
    src = np.asarray(source_pos, dtype=np.float64)
    mics = np.asarray(mic_pos, dtype=np.float64)
    single = mics.ndim == 1
    mics = np.atleast_2d(mics)
    if not _inside(room, src):
        raise ValueError(f"source position {src.tolist()} is outside the room {room.tolist()}")
    for m in mics:
        if not _inside(room, m):
            raise ValueError(f"mic position {m.tolist()} is outside the room {room.tolist()}")
    if reflection is None:
        if t60 is None or t60 <= 0:
            raise ValueError("t60 must be positive unless a reflection coefficient is given")
        reflection = calibrated_reflection(tuple(room.tolist()), float(t60), int(fs), c)
    if length is None:
        if t60 is None or t60 <= 0:
            raise ValueError("length is required when t60 is not given")
        length = int(math.ceil(t60 * fs))
    max_dist = length * c / fs

    img, order = _image_sources(room, src, max_dist)
    if reflection == 0.0:
        keep = order == 0
        img, order = img[keep], order[keep]

    out = np.zeros((mics.shape[0], length))
    for m, mic in enumerate(mics):
        dist = np.linalg.norm(img - mic, axis=1)
        keep = dist < max_dist
        d = dist[keep]
        gain = reflection ** order[keep] / (4 * np.pi * d)
        delay = d * fs / c
        # late, diffuse reflections do not need a long interpolator
        early = delay < delay.min() + EARLY_REFLECTIONS_S * fs
        for sel, half in ((early, SINC_HALF_WIDTH), (~early, LATE_SINC_HALF_WIDTH)):
            out[m] += _fractional_impulses(delay[sel], gain[sel], half, length)
    if reflection > 0.0:
        out = _highpass(out, fs)
    return out[0] if single else out


def _fractional_impulses(delay: np.ndarray, gain: np.ndarray, half: int, length: int) -> np.ndarray:
    """Sum of gain-scaled Hann-windowed sinc pulses at fractional sample delays."""
    taps = np.arange(-half + 1, half + 1)
    sign = np.where(taps % 2 == 0, -1.0, 1.0)
    cos_k, sin_k = np.cos(np.pi * taps / half), np.sin(np.pi * taps / half)
    base = np.floor(delay).astype(np.int64)
    frac = (delay - base)[:, None]
    # sin(pi (k - f)) = (-1)^(k+1) sin(pi f), so only per-pulse trig is needed
    offs = taps[None, :] - frac
    safe = np.where(offs == 0.0, 1.0, offs)
    sinc = np.where(offs == 0.0, 1.0, sign[None, :] * np.sin(np.pi * frac) / (np.pi * safe))
    hann = 0.5 + 0.5 * (cos_k[None, :] * np.cos(np.pi * frac / half)
                        + sin_k[None, :] * np.sin(np.pi * frac / half))
    w = (gain[:, None] * sinc) * hann
    idx = base[:, None] + taps[None, :]
    valid = (idx >= 0) & (idx < length)
    return np.bincount(idx[valid], weights=w[valid], minlength=length)[:length]


def _highpass(h: np.ndarray, fs: int, cutoff: float = 100.0) -> np.ndarray:
    """Allen & Berkley's DC-blocking filter.

    All image gains are positive, so without it the late tail piles up a DC
    component that stretches the measured decay.
    """
    w = 2 * np.pi * cutoff / fs
    r1 = np.exp(-w)
    y = lfilter([1.0], [1.0, -2 * r1 * np.cos(w), r1 * r1], h, axis=-1)
    return lfilter([1.0, -(1 + r1), r1], [1.0], y, axis=-1)


def schroeder_t60(rir: np.ndarray, fs: int, start_db: float = -5.0, stop_db: float = -25.0) -> float:
    """T60 extrapolated from a line fit to the Schroeder energy-decay curve."""
    energy = np.asarray(rir, dtype=np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    edc_db = 10 * np.log10(edc / edc[0] + 1e-300)
    sel = (edc_db <= start_db) & (edc_db >= stop_db)
    if sel.sum() < 2:
        raise ValueError("decay curve too short to fit")
    t = np.arange(len(rir))[sel] / fs
    slope, _ = np.polyfit(t, edc_db[sel], 1)
    return -60.0 / slope


def pseudo_speech(num_samples: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    """Speech-like test signal: syllables of formant-shaped harmonics and noise.

    Each call draws its own pitch range and vocal-tract scale, so two calls
    give speakers with distinct spectral envelopes. Output has unit RMS.
    """
    t = np.arange(num_samples) / fs
    f0_base = rng.uniform(90.0, 240.0)
    tract = rng.uniform(0.85, 1.2)
    # syllable boundaries with occasional pauses
    bounds, kinds, pos = [], [], 0
    while pos < num_samples:
        dur = int(rng.uniform(0.12, 0.35) * fs)
        kind = rng.choice(3, p=[0.7, 0.12, 0.18])  # voiced, unvoiced, silence
        if pos == 0:
            kind = 0  # never open on a pause, so short signals are not silent
        bounds.append((pos, min(pos + dur, num_samples)))
        kinds.append(kind)
        pos += dur

    # slow pitch contour: drift plus vibrato
    drift = np.cumsum(rng.normal(0, 1, num_samples // 400 + 2))
    drift = np.interp(np.arange(num_samples), np.arange(drift.size) * 400, drift)
    f0 = f0_base * np.exp(0.03 * drift / (1 + np.abs(drift).max()) * 4) \
        * (1 + 0.02 * np.sin(2 * np.pi * rng.uniform(4, 6) * t))
    phase = 2 * np.pi * np.cumsum(f0) / fs

    formants = np.zeros((num_samples, 3))
    env = np.zeros(num_samples)
    voiced = np.zeros(num_samples)
    for (a, b), kind in zip(bounds, kinds):
        formants[a:b] = tract * np.array([rng.uniform(300, 850), rng.uniform(900, 2300),
                                          rng.uniform(2300, 3300)])
        n = b - a
        if kind == 2:
            continue
        ramp = np.abs(np.sin(np.pi * np.arange(n) / max(n - 1, 1))) ** 0.7
        env[a:b] = ramp * rng.uniform(0.5, 1.0)
        voiced[a:b] = 1.0 if kind == 0 else 0.0
    # smooth formant transitions over ~20 ms
    k = int(0.02 * fs)
    kern = np.ones(k) / k
    formants = np.stack([np.convolve(np.pad(formants[:, i], (k, k), mode="edge"), kern, "same")[k:-k]
                         for i in range(3)], axis=1)

    def envelope(freq):
        gain = np.zeros_like(freq)
        for i, bw in enumerate((80.0, 120.0, 180.0)):
            fc = formants[:, i:i + 1] if freq.ndim == 2 else formants[:, i]
            gain += 1.0 / (1.0 + ((freq - fc) / bw) ** 2) / (i + 1)
        return gain

    n_harm = int(fs / 2 / (f0_base * 0.8))
    harm = np.arange(1, n_harm + 1)[None, :]
    hf = f0[:, None] * harm
    amps = envelope(hf) * (hf < fs / 2 - 100) / np.sqrt(harm)
    harmonic = np.sum(amps * np.sin(phase[:, None] * harm), axis=1)

    noise = rng.normal(0, 1, num_samples)
    spec = np.fft.rfft(noise)
    noise = np.fft.irfft(spec * np.linspace(0.3, 1.0, spec.size), n=num_samples)
    signal = env * (voiced * harmonic / (np.std(harmonic) + 1e-12)
                    + (1 - voiced) * 0.5 * noise / (np.std(noise) + 1e-12))
    rms = np.sqrt(np.mean(signal ** 2))
    return signal / rms if rms > 0 else signal


def sample_scene_spec(rng: np.random.Generator, num_speakers: int = 2, num_farfield_mics: int = 6,
                      t60_range=(0.2, 0.5), snr_range=(20.0, 30.0)) -> SceneSpec:
    """Draw scene parameters from the simulation ranges."""
    if not (0.2 <= t60_range[0] <= t60_range[1] <= 0.5):
        raise ValueError(f"t60 range {t60_range} must lie within [0.2, 0.5]")
    room = (rng.uniform(5.0, 7.5), rng.uniform(5.0, 7.5), rng.uniform(2.6, 3.4))
    return SceneSpec(
        room_dims_m=room,
        t60_s=float(rng.uniform(*t60_range)),
        num_speakers=num_speakers,
        num_farfield_mics=num_farfield_mics,
        speaker_to_array_dist_m=tuple(rng.uniform(1.0, 2.0, num_speakers)),
        closetalk_dist_m=tuple(rng.uniform(0.10, 0.30, num_speakers)),
        noise_snr_db=float(rng.uniform(*snr_range)),
        rng_seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def _unit_vector(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def layout(spec: SceneSpec, rng: np.random.Generator, max_tries: int = 1000) -> Geometry:
    """Place the array, speakers and close-talk mics (all strictly inside the room)."""
    room = np.asarray(spec.room_dims_m)
    radius = spec.array_diameter_m / 2
    for _ in range(max_tries):
        reach = max(spec.speaker_to_array_dist_m) + 0.5
        lo = np.array([reach, reach, 1.2])
        hi = np.array([room[0] - reach, room[1] - reach, min(1.8, room[2] - 0.5)])
        lo = np.minimum(lo, room / 2)
        hi = np.maximum(hi, lo)
        center = rng.uniform(lo, hi)
        phi0 = rng.uniform(0, 2 * np.pi)
        ang = phi0 + 2 * np.pi * np.arange(spec.num_farfield_mics) / spec.num_farfield_mics
        ff = center + radius * np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], axis=1)
        if spec.num_farfield_mics == 1:
            ff = center[None, :].copy()
        speakers, closetalk = [], []
        ok = all(_inside(room, m, 0.05) for m in ff)
        for c in range(spec.num_speakers):
            if not ok:
                break
            for _ in range(max_tries):
                az = rng.uniform(0, 2 * np.pi)
                height = rng.uniform(1.3, 1.9)
                pos = center + spec.speaker_to_array_dist_m[c] * np.array([np.cos(az), np.sin(az), 0.0])
                pos[2] = min(height, room[2] - 0.3)
                # keep the horizontal distance as sampled
                if _inside(room, pos, 0.3):
                    break
            else:
                ok = False
                break
            for _ in range(max_tries):
                ct = pos + spec.closetalk_dist_m[c] * _unit_vector(rng)
                if _inside(room, ct, 0.05):
                    break
            else:
                ok = False
                break
            speakers.append(pos)
            closetalk.append(ct)
        if ok:
            return Geometry(ff, np.array(closetalk), np.array(speakers))
    raise RuntimeError("could not place the scene inside the room")


def synthesize_scene(spec: SceneSpec, sources=None, num_samples: int | None = None,
                     max_tries: int = 50) -> Scene:
    """Simulate one scene from its spec.

    ``sources`` are C dry signals (all the same length); when omitted,
    pseudo-speech of ``num_samples`` samples is generated from the seed.
    The geometry is redrawn until each close-talk mic is dominated by its
    own speaker.
    """
    rng = np.random.default_rng(spec.rng_seed)
    fs = spec.sample_rate_hz
    if sources is None:
        if num_samples is None:
            raise ValueError("give either sources or num_samples")
        sources = [pseudo_speech(num_samples, fs, rng) for _ in range(spec.num_speakers)]
    if isinstance(sources, np.ndarray) and sources.ndim == 1:
        sources = [sources]
    if len(sources) != spec.num_speakers:
        raise ValueError(f"expected {spec.num_speakers} sources, got {len(sources)}")
    lengths = {len(s) for s in sources}
    if len(lengths) != 1:
        raise ValueError(f"dry sources differ in length: {sorted(lengths)}")
    dry = np.stack([np.asarray(s, dtype=np.float32) for s in sources])
    n = dry.shape[1]

    for _ in range(max_tries):
        geom = layout(spec, rng)
        mics = geom.mics
        rirs = np.stack([simulate_rir(spec.room_dims_m, spec.t60_s, geom.speakers[c], mics, fs)
                         for c in range(spec.num_speakers)])
        images64 = np.stack([
            [fftconvolve(dry[c].astype(np.float64), rirs[c, r])[:n] for r in range(mics.shape[0])]
            for c in range(spec.num_speakers)])
        images = images64.astype(np.float32)
        if closetalk_dominated(images, spec.num_farfield_mics):
            break
    else:
        raise RuntimeError("could not draw a geometry with dominant close-talk speech")

    noise = np.zeros((mics.shape[0], n), dtype=np.float32)
    if spec.noise_snr_db is not None:
        white = rng.normal(size=(mics.shape[0], n))
        speech = images.astype(np.float64).sum(axis=0)
        for r in range(mics.shape[0]):
            p_speech = np.sum(speech[r] ** 2)
            p_noise = np.sum(white[r] ** 2)
            white[r] *= np.sqrt(p_speech / (p_noise * 10 ** (spec.noise_snr_db / 10)))
        noise = white.astype(np.float32)
    return Scene(spec=spec, geometry=geom, dry=dry, rirs=rirs, images=images, noise=noise)


def closetalk_dominated(images: np.ndarray, num_farfield: int) -> bool:
    """True when every close-talk mic d holds more energy from speaker d than from any other."""
    num_speakers = images.shape[0]
    energy = np.sum(images.astype(np.float64) ** 2, axis=-1)  # (C, R)
    for d in range(num_speakers):
        col = energy[:, num_farfield + d]
        if any(col[d] <= col[c] for c in range(num_speakers) if c != d):
            return False
    return True
