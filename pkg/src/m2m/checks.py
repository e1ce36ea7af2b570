"""Oracle separation runs and finite-difference gradient suites."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import separator as sep
from .fcp import TapConfig, compute_weights_ff, fcp_image, solve_fcp, stack_taps
from .losses import LossConfig, frozen_filter_loss, mc_loss, mc_loss_backward
from .metrics import si_sdr
from .spectral import istft_array, stft_array

GRAD_TOL = 1e-4


# ---------------------------------------------------------------- oracle

def oracle_images(scene, past: int = 19, future: int = 1, xi: float = 1e-4) -> np.ndarray:
    """FCP-estimated images at far-field mic 0 with the true dry sources as Z."""
    ff = stft_array(scene.farfield_mix)
    dry = stft_array(scene.dry)
    weights = compute_weights_ff(ff, xi)
    est = np.empty_like(dry)
    for c in range(dry.shape[0]):
        zs = stack_taps(dry[c], past, future)
        est[c] = fcp_image(solve_fcp(zs, ff[0], weights, past, future, mic=0), zs)
    return istft_array(est, scene.num_samples)


def oracle_rows(scenes, past: int = 19, future: int = 1, xi: float = 1e-4) -> list[dict]:
    rows = []
    for i, scene in enumerate(scenes):
        est = oracle_images(scene, past, future, xi)
        refs = scene.images[:, 0].astype(np.float64)
        mix = scene.farfield_mix[0].astype(np.float64)
        per = [si_sdr(est[c], refs[c]) for c in range(len(refs))]
        base = [si_sdr(mix, r) for r in refs]
        rows.append({"scene": i, "seed": scene.spec.rng_seed, "oracle_si_sdr": float(np.mean(per)),
                     "mixture_si_sdr": float(np.mean(base)), "per_source": per})
    return rows


def write_oracle_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "seed", "oracle_si_sdr", "mixture_si_sdr"])
        for r in rows:
            w.writerow([r["scene"], r["seed"], repr(r["oracle_si_sdr"]), repr(r["mixture_si_sdr"])])
    return path


# ---------------------------------------------------------------- gradient suites

@dataclass
class GradResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tol)


def _crandn(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def _rel(fd: float, an: float) -> float:
    return abs(fd - an) / max(abs(fd), 1e-6)


def _loss_suite(rng, mode: str, through: bool, step: float, corrupt: float, n: int) -> float:
    C, P, T, F = 2, 3, 14, 5
    z, ct, ff = _crandn(rng, C, T, F), _crandn(rng, C, T, F), _crandn(rng, P, T, F)
    cfg = LossConfig(alpha=0.8, taps=TapConfig(2, 1, 3, 1), mode=mode, grad_through_fcp=through)
    br = mc_loss(z, ct, ff, cfg)
    grad = mc_loss_backward(br) * (1 + corrupt)
    fn = (lambda zz: mc_loss(zz, ct, ff, cfg).total) if through else \
        (lambda zz: frozen_filter_loss(br, zz))
    errs = []
    for _ in range(n):
        idx = tuple(int(rng.integers(s)) for s in z.shape)
        for unit, part in ((1.0, np.real), (1j, np.imag)):
            zp, zm = z.copy(), z.copy()
            zp[idx] += step * unit
            zm[idx] -= step * unit
            errs.append(_rel((fn(zp) - fn(zm)) / (2 * step), part(grad[idx])))
    return max(errs)


def _separator_suite(rng, P: int, step: float, corrupt: float, n: int) -> float:
    cfg = sep.SeparatorConfig(input_channels=P, num_sources=2, context_frames=3, hidden_width=8,
                              num_layers=2, num_freqs=9)
    params = sep.init_params(cfg, int(rng.integers(2 ** 31)), np.float64)
    y, gz = _crandn(rng, P, 7, 9), _crandn(rng, 2, 7, 9)
    _, tape = sep.forward(params, y, cache=True)
    grads = sep.backward(params, tape, gz)
    fn = lambda pp: float(np.sum((sep.forward(pp, y).conj() * gz).real))
    names = list(params.tensors)
    errs = []
    for _ in range(n):
        k = names[int(rng.integers(len(names)))]
        idx = tuple(int(rng.integers(s)) for s in params.tensors[k].shape)
        up, dn = params.copy(), params.copy()
        up.tensors[k][idx] += step
        dn.tensors[k][idx] -= step
        errs.append(_rel((fn(up) - fn(dn)) / (2 * step), grads[k][idx] * (1 + corrupt)))
    return max(errs)


def gradcheck(seed: int = 0, perturb: float | None = None, corrupt: float = 0.0,
              samples: int = 16) -> list[GradResult]:
    """Run every finite-difference suite; ``perturb`` replaces the relative tolerance.

    Finite-difference steps stay fixed: the distance is piecewise linear,
    so large steps straddle kinks and would measure nothing useful.

    ``corrupt`` scales the analytic gradients by (1 + corrupt), a self-test
    that the suites can fail.
    """
    tol = GRAD_TOL if perturb is None else max(GRAD_TOL, perturb)
    rng = np.random.default_rng(seed)
    out = []
    for mode in ("m2m", "unssor"):
        for through in (True, False):
            err = _loss_suite(rng, mode, through, 1e-4, corrupt, samples // 2)
            out.append(GradResult(f"mc_loss[{mode},through={through}]", err, tol))
    for P in (4, 1):
        err = _separator_suite(rng, P, 1e-6, corrupt, samples)
        out.append(GradResult(f"separator[P={P}]", err, tol))
    return out
