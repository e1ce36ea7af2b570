"""Training loops (M2M, UNSSOR, PIT), inference and evaluation."""

from __future__ import annotations

import csv
import itertools
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import separator as sep
from .fcp import FcpError, TapConfig, compute_weights_ff, fcp_image, solve_fcp, stack_taps
from .losses import LossConfig, Mode, mc_loss, mc_loss_backward, pit_loss
from .metrics import sdr_proj, si_sdr
from .spectral import StftConfig, istft_array, stft_array

STFT = StftConfig()
STATE_NAME = "state.ckpt"
MODEL_NAME = "model.sep"
LOG_NAME = "train_log.jsonl"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.M2M
    batch_size: int = 4
    segment_s: float = 4.0
    steps: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    alpha: float = 1.0
    taps: TapConfig = field(default_factory=TapConfig)
    grad_through_fcp: bool = True
    xi: float = 1e-4
    seed: int = 0
    input_channels: int = 6
    context_frames: int = 9
    hidden_width: int = 64
    num_layers: int = 3
    ckpt_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if isinstance(self.taps, str):
            object.__setattr__(self, "taps", TapConfig.parse(self.taps))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.segment_s * STFT.sample_rate_hz < STFT.window_len_samples:
            raise ValueError(f"segment_s={self.segment_s} is shorter than one STFT window")
        if self.steps < 0 or self.ckpt_every < 1:
            raise ValueError("steps must be >= 0 and ckpt_every >= 1")

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, taps=self.taps, mode=self.mode,
                          grad_through_fcp=self.grad_through_fcp, xi=self.xi)

    def separator_config(self, num_sources: int) -> sep.SeparatorConfig:
        return sep.SeparatorConfig(input_channels=self.input_channels, num_sources=num_sources,
                                   context_frames=self.context_frames,
                                   hidden_width=self.hidden_width, num_layers=self.num_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["taps"] = str(self.taps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "taps" in d and isinstance(d["taps"], str):
            d["taps"] = TapConfig.parse(d["taps"].replace("/", ","))
        return cls(**d)


# ---------------------------------------------------------------- optimizer

@dataclass
class Adam:
    lr: float
    beta1: float
    beta2: float
    eps: float
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def create(cls, params: sep.SeparatorParams, cfg: TrainConfig) -> "Adam":
        zeros = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, zeros,
                   {k: v.copy() for k, v in zeros.items()})

    def step(self, params: sep.SeparatorParams, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in params.tensors.items():
            g = grads[k].astype(np.float64)
            m = self.beta1 * self.m[k] + (1 - self.beta1) * g
            v = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            self.m[k] = m.astype(p.dtype)
            self.v[k] = v.astype(p.dtype)
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params.tensors[k] = (p - upd).astype(p.dtype)


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale gradients in place to a global norm of at most max_norm; return the raw norm."""
    norm = float(np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in grads.values())))
    if norm > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / norm)
    return norm


# ---------------------------------------------------------------- data

def _check_scene(scene, cfg: TrainConfig, num_sources: int):
    if scene.num_speakers != num_sources:
        raise ValueError(f"scene has {scene.num_speakers} speakers, model expects {num_sources}")
    if scene.num_farfield < cfg.input_channels:
        raise ValueError(f"scene has {scene.num_farfield} far-field mics, "
                         f"model needs {cfg.input_channels}")


def crop(scene, start: int, length: int, input_channels: int):
    """Synchronised crop of every channel: (far-field, close-talk, reference images)."""
    sl = slice(start, start + length)
    ff = scene.farfield_mix[:input_channels, sl]
    ct = scene.closetalk_mix[:, sl]
    ref = scene.images[:, 0, sl]
    return ff, ct, ref


def example_loss(params, ff_spec, ct_spec, ref_spec, cfg: TrainConfig):
    """Forward, loss and parameter gradients of one example.

    Returns (loss log dict, grads)."""
    z, tape = sep.forward(params, ff_spec, cache=True)
    if cfg.mode is Mode.PIT:
        res = pit_loss(z, ref_spec)
        log = {"total": res.loss, "perm": list(res.perm)}
        g = res.grad
    else:
        br = mc_loss(z, ct_spec if cfg.mode is Mode.M2M else None, ff_spec, cfg.loss_config)
        log = br.as_log()
        if not np.isfinite(br.total):
            raise FloatingPointError("loss is not finite")
        g = mc_loss_backward(br)
    return log, sep.backward(params, tape, g)


def _mean_terms(logs: list[dict]) -> dict:
    out = {"total": float(np.mean([l["total"] for l in logs]))}
    for key in ("closetalk", "farfield"):
        if key in logs[0]:
            out[key] = [float(v) for v in np.mean([l[key] for l in logs], axis=0)] \
                if logs[0][key] else []
    return out


# ---------------------------------------------------------------- training

def _save_state(ckpt_dir: Path, params, opt: Adam, step: int, cfg: TrainConfig):
    tensors = dict(params.tensors)
    tensors.update({f"adam.m.{k}": v for k, v in opt.m.items()})
    tensors.update({f"adam.v.{k}": v for k, v in opt.v.items()})
    meta = {"step": step, "adam_t": opt.t, "train": cfg.to_dict(),
            "separator": asdict(params.config), "seed": params.seed}
    sep.write_container(ckpt_dir / STATE_NAME, "train-state", meta, tensors)
    sep.save(params, ckpt_dir / MODEL_NAME, extra={"mode": cfg.mode.value, "step": step,
                                                   "taps": str(cfg.taps), "xi": cfg.xi})


def _load_state(ckpt_dir: Path, cfg: TrainConfig):
    meta, tensors = sep.read_container(ckpt_dir / STATE_NAME, "train-state")
    saved = TrainConfig.from_dict(meta["train"])
    if replace(saved, steps=cfg.steps) != replace(cfg, steps=cfg.steps):
        raise ValueError(f"{ckpt_dir}: checkpoint was trained with a different configuration")
    scfg = sep.SeparatorConfig.from_dict(meta["separator"])
    names = list(sep.init_params(scfg, 0).tensors)
    params = sep.SeparatorParams(scfg, int(meta["seed"]), {k: tensors[k] for k in names})
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps,
               {k: tensors[f"adam.m.{k}"] for k in names},
               {k: tensors[f"adam.v.{k}"] for k in names}, int(meta["adam_t"]))
    return params, opt, int(meta["step"])


def train(cfg: TrainConfig, scenes, ckpt_dir, resume: bool = False, log_fn=None):
    """Train a separator; returns (params, path of the JSONL loss log).

    Every step draws its crops from a generator seeded by (seed, step), so
    a resumed run follows the same trajectory as an uninterrupted one.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no training scenes")
    num_sources = scenes[0].num_speakers
    for s in scenes:
        _check_scene(s, cfg, num_sources)
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = ckpt_dir / LOG_NAME
    if resume and (ckpt_dir / STATE_NAME).exists():
        params, opt, start = _load_state(ckpt_dir, cfg)
    else:
        params = sep.init_params(cfg.separator_config(num_sources), cfg.seed)
        opt = Adam.create(params, cfg)
        start = 0
        log_path.write_text("")
    seg = int(round(cfg.segment_s * STFT.sample_rate_hz))
    t0 = time.perf_counter()
    for step in range(start, cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        acc, logs = None, []
        for _ in range(cfg.batch_size):
            scene = scenes[int(rng.integers(len(scenes)))]
            length = min(seg, scene.num_samples)
            begin = int(rng.integers(0, scene.num_samples - length + 1))
            ff, ct, ref = (stft_array(x) for x in crop(scene, begin, length, cfg.input_channels))
            try:
                log, grads = example_loss(params, ff, ct, ref, cfg)
            except (FloatingPointError, FcpError) as err:
                raise TrainingDiverged(step, str(err)) from err
            logs.append(log)
            acc = sep.add_grads(acc, grads)
        norm = clip_grads(acc, cfg.clip_norm)
        if not np.isfinite(norm):
            raise TrainingDiverged(step, "gradient norm is not finite")
        opt.step(params, acc)
        entry = {"step": step, **_mean_terms(logs), "grad_norm": norm,
                 "wall_time": time.perf_counter() - t0}
        with open(log_path, "a") as fh:
            fh.write(json.dumps(entry) + "\n")
        if log_fn is not None:
            log_fn(entry)
        if (step + 1) % cfg.ckpt_every == 0 or step + 1 == cfg.steps:
            _save_state(ckpt_dir, params, opt, step + 1, cfg)
    if start >= cfg.steps and not (ckpt_dir / MODEL_NAME).exists():
        _save_state(ckpt_dir, params, opt, start, cfg)
    return params, log_path


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


# ---------------------------------------------------------------- inference

def infer(params: sep.SeparatorParams, scene, mode=Mode.M2M, taps: TapConfig = TapConfig(),
          xi: float = 1e-4) -> np.ndarray:
    """C time-domain estimates of the speaker images at far-field mic 0.

    M2M and UNSSOR outputs are mapped to the reference mic by FCP against
    the mixture there; PIT outputs are already images and are used as is.
    """
    mode = Mode(mode)
    cfg = params.config
    if scene.num_speakers != cfg.num_sources:
        raise sep.CheckpointError(f"model outputs {cfg.num_sources} sources, "
                                  f"scene has {scene.num_speakers}")
    if scene.num_farfield < cfg.input_channels:
        raise sep.CheckpointError(f"model takes {cfg.input_channels} mics, "
                                  f"scene has {scene.num_farfield}")
    n = scene.num_samples
    ff = stft_array(scene.farfield_mix[:cfg.input_channels])
    z = sep.forward(params, ff)
    if mode is Mode.PIT:
        est = z
    else:
        past, future = taps.farfield
        weights = compute_weights_ff(ff, xi)
        est = np.empty_like(z)
        for c in range(z.shape[0]):
            zs = stack_taps(z[c], past, future)
            est[c] = fcp_image(solve_fcp(zs, ff[0], weights, past, future, mic=0), zs)
    return istft_array(est, n)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    label: str
    rows: list = field(default_factory=list)

    @property
    def mean_si_sdr(self) -> float:
        return float(np.mean([r["si_sdr"] for r in self.rows]))

    @property
    def mean_sdr(self) -> float:
        return float(np.mean([r["sdr"] for r in self.rows]))

    def summary(self) -> dict:
        return {"label": self.label, "num_utterances": len(self.rows),
                "mean_si_sdr": self.mean_si_sdr, "mean_sdr": self.mean_sdr}


def score(estimates: np.ndarray, refs: np.ndarray, sdr_taps: int = 512) -> dict:
    """Best-permutation SI-SDR (utterance level) plus SDR under that permutation."""
    C = refs.shape[0]
    table = np.array([[si_sdr(estimates[e], refs[c]) for e in range(C)] for c in range(C)])
    perm = max(itertools.permutations(range(C)),
               key=lambda p: sum(table[c, p[c]] for c in range(C)))
    per_si = [float(table[c, perm[c]]) for c in range(C)]
    per_sdr = [sdr_proj(estimates[perm[c]], refs[c], sdr_taps) for c in range(C)]
    return {"perm": list(perm), "si_sdr": float(np.mean(per_si)), "sdr": float(np.mean(per_sdr)),
            "si_sdr_per_source": per_si, "sdr_per_source": per_sdr}


def mixture_row(scene, sdr_taps: int = 512) -> dict:
    """The unprocessed reference-mic mixture scored against every speaker image."""
    refs = scene.images[:, 0].astype(np.float64)
    mix = scene.farfield_mix[0].astype(np.float64)
    si = [si_sdr(mix, r) for r in refs]
    sd = [sdr_proj(mix, r, sdr_taps) for r in refs]
    return {"perm": list(range(len(refs))), "si_sdr": float(np.mean(si)),
            "sdr": float(np.mean(sd)), "si_sdr_per_source": si, "sdr_per_source": sd}


def evaluate(params, scenes, mode=Mode.M2M, taps: TapConfig = TapConfig(), xi: float = 1e-4,
             sdr_taps: int = 512, label: str | None = None) -> tuple[EvalReport, EvalReport]:
    """Score a model and the mixture baseline over scenes; returns (model, mixture)."""
    mode = Mode(mode)
    model = EvalReport(label or mode.value)
    mixture = EvalReport("mixture")
    for i, scene in enumerate(scenes):
        est = infer(params, scene, mode, taps, xi)
        refs = scene.images[:, 0].astype(np.float64)
        model.rows.append({"utterance": i, **score(est, refs, sdr_taps)})
        mixture.rows.append({"utterance": i, **mixture_row(scene, sdr_taps)})
    return model, mixture


def write_report(reports: list[EvalReport], out_prefix) -> tuple[Path, Path]:
    """Per-utterance CSV plus a JSON summary / comparison table."""
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_prefix.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system", "utterance", "perm", "si_sdr", "sdr"])
        for rep in reports:
            for r in rep.rows:
                w.writerow([rep.label, r["utterance"], " ".join(map(str, r["perm"])),
                            repr(r["si_sdr"]), repr(r["sdr"])])
    json_path = out_prefix.with_suffix(".json")
    doc = {"systems": [rep.summary() for rep in reports],
           "utterances": {rep.label: rep.rows for rep in reports}}
    json_path.write_text(json.dumps(doc, indent=1))
    return csv_path, json_path
