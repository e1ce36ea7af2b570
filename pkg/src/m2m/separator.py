"""Small numpy separator with a hand-written backward pass.

Pipeline for a far-field mixture Y of shape (P, T, F):

1. Fixed (parameter-free) features per TF bin. The two dominant arrival
   directions of the utterance are read off an energy-weighted histogram
   of per-bin steered-response peaks; the log ratio of the steered
   power toward them is the spatial prior. The MLP also sees inter-mic
   phase differences against mic 0 and the mean-removed log power of
   mic 0.
2. A windowed MLP (context_frames frames, shared over frequency, plus a
   learned frequency embedding) maps the features to mask logits.
3. Masks drive a per-frequency multichannel Wiener filter whose output at
   mic 0 is the estimate Z(c). With one input mic the masks are applied
   to the mixture directly.

For two sources and several mics the mask is
m1 = sigmoid(gain * softplus(a) / log 2 * prior + r~), m2 = 1 - m1,
where r~ is the residual logit with its |Y0|^2-weighted mean over time
removed at every frequency. The residual can move single bins between
the sources but cannot hand a whole band to one of them, so the network
cannot reach the trivial solution of copying the mixture into one output.

Features are scale invariant and the filter is linear in Y, hence the
outputs scale with the input (normalisation is implicit).
"""

from __future__ import annotations

import json
import struct
from functools import lru_cache
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_NAME = "m2m-separator"
FORMAT_VERSION = 1
_MAGIC = b"M2MSEP\x00\x01"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class SeparatorConfig:
    input_channels: int = 6
    num_sources: int = 2
    context_frames: int = 9
    hidden_width: int = 64
    num_layers: int = 3
    freq_embed: int = 8
    num_freqs: int = 129
    sample_rate_hz: int = 8000
    array_radius_m: float = 0.1
    speed_of_sound: float = 343.0
    doa_bins: int = 72
    prior_gain: float = 10.0
    hist_band: tuple = (4, 100)  # frequency bins used to find the directions
    min_separation: int = 6      # doa bins between the two directions
    mwf_loading: float = 1e-3

    def __post_init__(self):
        if self.input_channels < 1 or self.num_sources < 1:
            raise ValueError("input_channels and num_sources must be positive")
        if self.context_frames < 1 or self.context_frames % 2 == 0:
            raise ValueError(f"context_frames must be odd and >= 1, got {self.context_frames}")
        if self.hidden_width < 1 or self.num_layers < 1:
            raise ValueError("hidden_width and num_layers must be positive")
        object.__setattr__(self, "hist_band", tuple(int(v) for v in self.hist_band))

    @property
    def spatial(self) -> bool:
        return self.input_channels > 1

    @property
    def sign_masks(self) -> bool:
        return self.spatial and self.num_sources == 2

    @property
    def num_features(self) -> int:
        return 2 * self.input_channels if self.spatial else 1

    @property
    def input_dim(self) -> int:
        return self.num_features * self.context_frames + self.freq_embed

    @property
    def num_outputs(self) -> int:
        return 2 if self.sign_masks else self.num_sources

    @classmethod
    def from_dict(cls, d: dict) -> "SeparatorConfig":
        return cls(**d)


@dataclass
class SeparatorParams:
    config: SeparatorConfig
    seed: int
    tensors: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def astype(self, dtype) -> "SeparatorParams":
        return SeparatorParams(self.config, self.seed,
                               {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "SeparatorParams":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype


def layer_names(cfg: SeparatorConfig) -> list[str]:
    return [f"l{i}" for i in range(cfg.num_layers)] + ["out"]


def init_params(cfg: SeparatorConfig, seed: int, dtype=np.float32) -> SeparatorParams:
    """Uniform(+-1/sqrt(fan_in)) weights and biases; normal(0, 0.1) frequency embedding."""
    rng = np.random.default_rng(seed)
    tensors = {"freq_embed": rng.normal(0.0, 0.1, (cfg.num_freqs, cfg.freq_embed))}
    dims = [cfg.input_dim] + [cfg.hidden_width] * cfg.num_layers + [cfg.num_outputs]
    for name, fan_in, fan_out in zip(layer_names(cfg), dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        tensors[f"{name}.w"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        tensors[f"{name}.b"] = rng.uniform(-bound, bound, fan_out)
    params = SeparatorParams(cfg, int(seed), tensors)
    return params.astype(dtype)


# ---------------------------------------------------------------- features

@lru_cache(maxsize=8)
def _steering(cfg: SeparatorConfig) -> np.ndarray:
    """(F, D, P) plane-wave steering vectors of the circular array."""
    P, D = cfg.input_channels, cfg.doa_bins
    az = 2 * np.pi * np.arange(D) / D
    mic = 2 * np.pi * np.arange(P) / P
    tau = -(cfg.array_radius_m / cfg.speed_of_sound) * np.cos(az[:, None] - mic[None, :])
    freqs = np.arange(cfg.num_freqs) * cfg.sample_rate_hz / (2 * (cfg.num_freqs - 1))
    return np.exp(-2j * np.pi * freqs[:, None, None] * tau[None])


def _log_power(y0: np.ndarray, scale: float) -> np.ndarray:
    lm = np.log(np.abs(y0 / scale) ** 2 + 1e-4)
    return lm - lm.mean()


def _directions(cfg: SeparatorConfig, power: np.ndarray, w: np.ndarray) -> tuple[int, int]:
    """Two dominant doa bins from the peaks of power (F, D, T), weights w (T, F)."""
    lo, hi = cfg.hist_band
    peak = np.argmax(power[lo:hi], axis=1).T  # T, band
    band = w[:, lo:hi]
    tot = band.sum(axis=0, keepdims=True)
    wt = np.divide(band, tot, out=np.zeros_like(band), where=tot > 0)
    hist = np.bincount(peak.ravel(), weights=wt.ravel(), minlength=cfg.doa_bins)
    hist = hist + 0.5 * (np.roll(hist, 1) + np.roll(hist, -1))
    d1 = int(np.argmax(hist))
    idx = np.arange(cfg.doa_bins)
    dist = np.minimum(np.abs(idx - d1), cfg.doa_bins - np.abs(idx - d1))
    d2 = int(np.argmax(np.where(dist >= cfg.min_separation, hist, -1.0)))
    return d1, d2


def features(cfg: SeparatorConfig, y: np.ndarray, prior: bool = False):
    """(NF, T, F) parameter-free features of the mixture (P, T, F).

    With ``prior=True`` (several mics only) also returns the (T, F) log
    ratio of steered power toward the two dominant directions.
    """
    scale = np.sqrt(np.mean(np.abs(y[0]) ** 2)) + 1e-8
    lm = _log_power(y[0], scale)
    if not cfg.spatial:
        return lm[None]
    yn = y / scale
    power = np.abs(_steering(cfg).conj() @ yn.transpose(2, 0, 1)) ** 2  # F, D, T
    d1, d2 = _directions(cfg, power, np.abs(yn[0]) ** 2)
    lr = np.clip(np.log(power[:, d1] + 1e-20) - np.log(power[:, d2] + 1e-20), -30, 30).T
    rel = yn[1:] * yn[0].conj()[None]
    ph = rel / (np.abs(rel) + 1e-8)
    x = np.concatenate([np.clip(lr / 8, -3, 3)[None], ph.real, ph.imag, lm[None]])
    return (x, lr) if prior else x


def _windows(x: np.ndarray, context: int) -> np.ndarray:
    """(NF, T, F) -> (T, F, context * NF), zero padded in time."""
    nf, T, F = x.shape
    hw = context // 2
    xp = np.pad(x, ((0, 0), (hw, hw), (0, 0)))
    return np.concatenate([xp[:, k:k + T] for k in range(context)], axis=0).transpose(1, 2, 0)


# ---------------------------------------------------------------- model

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_input(cfg: SeparatorConfig, y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 3 or y.shape[0] != cfg.input_channels or y.shape[2] != cfg.num_freqs:
        raise ValueError(f"expected mixture of shape ({cfg.input_channels}, T, {cfg.num_freqs}), "
                         f"got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("mixture spectrogram is not finite")
    return y.astype(np.complex128)


def forward(params: SeparatorParams, y, cache: bool = False):
    """Estimates Z of shape (C, T, F) from the far-field mixture (P, T, F).

    With ``cache=True`` returns (Z, tape) for :func:`backward`.
    """
    cfg = params.config
    p = params.tensors
    y = _check_input(cfg, y)
    T = y.shape[1]
    dt = params.dtype
    if cfg.spatial:
        x, prior = features(cfg, y, prior=True)
    else:
        x = features(cfg, y)
    inp = np.concatenate([_windows(x, cfg.context_frames),
                          np.broadcast_to(p["freq_embed"][None], (T, cfg.num_freqs, cfg.freq_embed))],
                         axis=-1).reshape(T * cfg.num_freqs, cfg.input_dim).astype(dt)
    acts, hs = [], [inp]
    h = inp
    for name in layer_names(cfg)[:-1]:
        a = h @ p[f"{name}.w"] + p[f"{name}.b"]
        h = a * _sigmoid(a)
        acts.append(a)
        hs.append(h)
    o = (h @ p["out.w"] + p["out.b"]).reshape(T, cfg.num_freqs, cfg.num_outputs).astype(np.float64)

    if cfg.sign_masks:
        soft = np.logaddexp(0.0, o[..., 0])
        w0 = np.abs(y[0]) ** 2
        tot = w0.sum(axis=0, keepdims=True)
        wn = np.divide(w0, tot, out=np.full_like(w0, 1.0 / T), where=tot > 0)
        r = o[..., 1] - (wn * o[..., 1]).sum(axis=0, keepdims=True)
        m1 = _sigmoid(cfg.prior_gain / np.log(2.0) * soft * prior + r)
        masks = np.stack([m1, 1.0 - m1])
        head = {"prior": prior, "wn": wn, "m1": m1}
    else:
        e = np.exp(o - o.max(axis=-1, keepdims=True))
        masks = (e / e.sum(axis=-1, keepdims=True)).transpose(2, 0, 1)
        head = {}

    if cfg.spatial:
        yf = y.transpose(2, 1, 0)  # F, T, P
        A = np.einsum("ftp,ftq->fpq", yf, yf.conj())
        load = cfg.mwf_loading * np.trace(A, axis1=1, axis2=2).real / cfg.input_channels
        A = A + (np.maximum(load, 1e-30))[:, None, None] * np.eye(cfg.input_channels)
        b = np.einsum("cft,ftp,ft->cfp", masks.transpose(0, 2, 1), yf, yf[..., 0].conj())
        w = np.linalg.solve(A[None], b[..., None])[..., 0]  # C, F, P
        z = np.einsum("cfp,ftp->ctf", w.conj(), yf)
        extra = {"A": A, "yf": yf}
    else:
        z = masks * y[0][None]
        extra = {}
    if not cache:
        return z
    tape = {"o": o, "masks": masks, "acts": acts, "hs": hs, "y": y, "T": T, **head, **extra}
    return z, tape


def backward(params: SeparatorParams, tape: dict, grad_z) -> dict:
    """Parameter gradients given dL/dRe Z + i dL/dIm Z of shape (C, T, F)."""
    cfg = params.config
    p = params.tensors
    grad_z = np.asarray(grad_z)
    if grad_z.shape != tape["masks"].shape:
        raise ValueError(f"gradient shape {grad_z.shape} != output shape {tape['masks'].shape}")
    if not np.all(np.isfinite(grad_z)):
        raise FloatingPointError("upstream gradient is not finite")
    y = tape["y"]
    if cfg.spatial:
        yf = tape["yf"]
        gw = np.einsum("ctf,ftp->cfp", grad_z.conj(), yf)
        gb = np.linalg.solve(tape["A"][None], gw[..., None])[..., 0]
        gm = np.einsum("cfp,ftp,ft->ctf", gb.conj(), yf, yf[..., 0].conj()).real
    else:
        gm = (grad_z.conj() * y[0][None]).real

    o, masks = tape["o"], tape["masks"]
    if cfg.sign_masks:
        m1 = tape["m1"]
        gu = (gm[0] - gm[1]) * m1 * (1.0 - m1)
        go = np.stack([gu * cfg.prior_gain / np.log(2.0) * tape["prior"] * _sigmoid(o[..., 0]),
                       gu - tape["wn"] * gu.sum(axis=0, keepdims=True)], axis=-1)
    else:
        go = (masks * (gm - (masks * gm).sum(axis=0, keepdims=True))).transpose(1, 2, 0)

    dt = params.dtype
    grads = {}
    g = go.reshape(-1, cfg.num_outputs).astype(dt)
    names = layer_names(cfg)
    hs, acts = tape["hs"], tape["acts"]
    grads["out.w"] = hs[-1].T @ g
    grads["out.b"] = g.sum(axis=0)
    g = g @ p["out.w"].T
    for i in range(cfg.num_layers - 1, -1, -1):
        a = acts[i]
        s = _sigmoid(a)
        g = g * (s * (1.0 + a * (1.0 - s)))
        grads[f"{names[i]}.w"] = hs[i].T @ g
        grads[f"{names[i]}.b"] = g.sum(axis=0)
        g = g @ p[f"{names[i]}.w"].T
    ge = g[:, -cfg.freq_embed:].reshape(tape["T"], cfg.num_freqs, cfg.freq_embed)
    grads["freq_embed"] = ge.sum(axis=0)
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite gradient for parameter {k}")
    return {k: grads[k] for k in p}


def add_grads(acc: dict | None, grads: dict) -> dict:
    if acc is None:
        return {k: v.copy() for k, v in grads.items()}
    for k, v in grads.items():
        acc[k] += v
    return acc


# ---------------------------------------------------------------- container

def write_container(path, kind: str, meta: dict, tensors: dict) -> Path:
    """JSON header plus little-endian float32 payload of named tensors."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "<f4",
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": kind,
                         "meta": meta, "tensors": entries}).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<Q", len(header)) + header)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


def read_container(path, kind: str | None = None) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a separator checkpoint")
    (hlen,) = struct.unpack("<Q", raw[len(_MAGIC):len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    header = json.loads(raw[start:start + hlen])
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format {header.get('format')!r} version "
                              f"{header.get('version')!r}, expected {FORMAT_NAME!r} {FORMAT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: holds {header.get('kind')!r}, expected {kind!r}")
    payload = raw[start + hlen:]
    tensors = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float32)
    return header["meta"], tensors


def save(params: SeparatorParams, path, extra: dict | None = None) -> Path:
    meta = {"config": asdict(params.config), "seed": params.seed, "param_count": params.count,
            **(extra or {})}
    return write_container(path, "separator", meta, params.tensors)


def load(path, num_sources: int | None = None, input_channels: int | None = None):
    """Read a separator; optionally check it matches the scene's C and P."""
    meta, tensors = read_container(path, "separator")
    cfg = SeparatorConfig.from_dict(meta["config"])
    if num_sources is not None and cfg.num_sources != num_sources:
        raise CheckpointError(f"{path}: model outputs {cfg.num_sources} sources, scene has {num_sources}")
    if input_channels is not None and cfg.input_channels != input_channels:
        raise CheckpointError(f"{path}: model takes {cfg.input_channels} mics, got {input_channels}")
    expect = init_params(cfg, 0).tensors
    for k, v in expect.items():
        if k not in tensors or tensors[k].shape != v.shape:
            raise CheckpointError(f"{path}: tensor {k} missing or misshapen")
    return SeparatorParams(cfg, int(meta["seed"]), {k: tensors[k] for k in expect})
