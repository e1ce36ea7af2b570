"""Mixture-constraint (MC) loss, its gradient, and the supervised PIT loss.

All spectrogram arrays are (..., T, F) complex. Gradients of the real-valued
losses are returned in the same complex layout as dL/dRe + i dL/dIm.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np

from .fcp import (DEFAULT_XI, FcpError, FcpSystem, TapConfig, compute_weights_ct,
                  compute_weights_ff, stack_taps_fmajor, unstack_taps_fmajor)

DENOM_EPS = 1e-12


class Mode(str, enum.Enum):
    M2M = "m2m"
    UNSSOR = "unssor"
    PIT = "pit"


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    taps: TapConfig = field(default_factory=TapConfig)
    mode: Mode = Mode.M2M
    grad_through_fcp: bool = True
    xi: float = DEFAULT_XI

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass
class LossBreakdown:
    total: float
    per_closetalk: np.ndarray   # (C,) L_MC,d (zeros in UNSSOR mode)
    per_farfield: np.ndarray    # (P,) L_MC,p
    recon_closetalk: np.ndarray  # (C, T, F) reconstructed close-talk mixtures
    recon_farfield: np.ndarray   # (P, T, F)
    tape: dict = field(default_factory=dict, repr=False)

    def as_log(self) -> dict:
        return {
            "total": float(self.total),
            "closetalk": [float(v) for v in self.per_closetalk],
            "farfield": [float(v) for v in self.per_farfield],
        }


def distance(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Sum over units of |dRe| + |dIm| + |d magnitude|, normalised by sum |y|."""
    y, y_hat = np.asarray(y), np.asarray(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    num = (np.abs(y.real - y_hat.real) + np.abs(y.imag - y_hat.imag)
           + np.abs(np.abs(y) - np.abs(y_hat))).sum()
    return float(num / (np.abs(y).sum() + DENOM_EPS))


def distance_grad(y: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    """d distance / d y_hat; the non-smooth points use subgradient 0.

    Leading axes beyond (T, F) are treated as independent channels, each
    normalised by its own sum |y|.
    """
    mag = np.abs(y_hat)
    unit = np.divide(y_hat, mag, out=np.zeros_like(y_hat), where=mag > 0)
    g = (np.sign(y_hat.real - y.real) + 1j * np.sign(y_hat.imag - y.imag)
         + np.sign(mag - np.abs(y)) * unit)
    return g / (np.abs(y).sum(axis=(-2, -1), keepdims=True) + DENOM_EPS)


def _check_inputs(z, closetalk, farfield, mode):
    z = np.asarray(z, dtype=np.complex128)
    farfield = np.asarray(farfield, dtype=np.complex128)
    if z.ndim != 3 or z.shape[0] < 1:
        raise ValueError("separator output must be (C, T, F) with C >= 1")
    if farfield.ndim != 3 or farfield.shape[1:] != z.shape[1:]:
        raise ValueError(f"far-field mixtures {farfield.shape} do not match estimates {z.shape}")
    if mode is Mode.M2M:
        closetalk = np.asarray(closetalk, dtype=np.complex128)
        if closetalk.ndim != 3 or closetalk.shape[1:] != z.shape[1:]:
            raise ValueError(f"close-talk mixtures {np.shape(closetalk)} do not match estimates {z.shape}")
    return z, closetalk, farfield


def _fmajor(x: np.ndarray) -> np.ndarray:
    """(R, T, F) -> (F, T, R)."""
    return np.ascontiguousarray(np.transpose(x, (2, 1, 0)))


def mc_loss(z, closetalk, farfield, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Mixture-constraint loss of separator estimates z (C, T, F).

    closetalk: (C_ct, T, F) close-talk mixtures (ignored in UNSSOR mode);
    farfield: (P, T, F) far-field mixtures. Each estimate is FCP-filtered
    towards every constraint mic independently, the filtered estimates are
    summed per mic and compared with the observed mixture.
    """
    if cfg.mode is Mode.PIT:
        raise ValueError("mc_loss is not defined for PIT mode; use pit_loss")
    z, closetalk, farfield = _check_inputs(z, closetalk, farfield, cfg.mode)
    C = z.shape[0]
    past_ff, fut_ff = cfg.taps.farfield
    past_ct, fut_ct = cfg.taps.closetalk

    ff_f = _fmajor(farfield)
    lam_ff = compute_weights_ff(farfield, cfg.xi).lam.T
    recon_ff_f = np.zeros_like(ff_f)
    ff_parts = []
    for c in range(C):
        zf = stack_taps_fmajor(z[c], past_ff, fut_ff)
        try:
            system = FcpSystem(zf, lam_ff, mic="far-field")
        except FcpError as err:
            raise FcpError(f"source {c}: {err}", mic="far-field", freq=err.freq) from None
        g = system.solve(ff_f)
        img = system.image(g)
        recon_ff_f += img
        ff_parts.append((system, g, img))
    recon_ff = np.transpose(recon_ff_f, (2, 1, 0))
    per_ff = np.array([distance(farfield[p], recon_ff[p]) for p in range(farfield.shape[0])])

    ct_parts = []
    ct_f = None
    if cfg.mode is Mode.M2M:
        n_ct = closetalk.shape[0]
        ct_f = _fmajor(closetalk)
        recon_ct_f = np.zeros_like(ct_f)
        lam_ct = [compute_weights_ct(closetalk[d], cfg.xi).lam.T for d in range(n_ct)]
        for c in range(C):
            zf = stack_taps_fmajor(z[c], past_ct, fut_ct)
            row = []
            for d in range(n_ct):
                try:
                    system = FcpSystem(zf, lam_ct[d], mic=f"close-talk {d}")
                except FcpError as err:
                    raise FcpError(f"source {c}: {err}", mic=f"close-talk {d}",
                                   freq=err.freq) from None
                g = system.solve(ct_f[..., d:d + 1])
                img = system.image(g)
                recon_ct_f[..., d:d + 1] += img
                row.append((system, g, img))
            ct_parts.append(row)
        recon_ct = np.transpose(recon_ct_f, (2, 1, 0))
        per_ct = np.array([distance(closetalk[d], recon_ct[d]) for d in range(n_ct)])
    else:
        recon_ct = np.zeros((0,) + z.shape[1:], dtype=np.complex128)
        per_ct = np.zeros(0)

    total = float(np.sum(per_ct) + cfg.alpha * np.sum(per_ff))
    tape = dict(cfg=cfg, z_shape=z.shape, closetalk=closetalk, farfield=farfield,
                ff_f=ff_f, ct_f=ct_f, ff_parts=ff_parts, ct_parts=ct_parts)
    return LossBreakdown(total=total, per_closetalk=per_ct, per_farfield=per_ff,
                         recon_closetalk=recon_ct, recon_farfield=recon_ff, tape=tape)


def mc_loss_backward(breakdown: LossBreakdown, grad_through_fcp: bool | None = None) -> np.ndarray:
    """Gradient of ``breakdown.total`` w.r.t. the estimates z, as (C, T, F) complex.

    ``grad_through_fcp`` defaults to the config value; False treats the FCP
    filters as constants.
    """
    tape = breakdown.tape
    if not tape:
        raise ValueError("breakdown carries no recorded forward pass")
    cfg: LossConfig = tape["cfg"]
    through = cfg.grad_through_fcp if grad_through_fcp is None else grad_through_fcp
    grad = np.zeros(tape["z_shape"], dtype=np.complex128)

    g_recon = _fmajor(cfg.alpha * distance_grad(tape["farfield"], breakdown.recon_farfield))
    for c, (system, g, img) in enumerate(tape["ff_parts"]):
        gz = system.backward(g, tape["ff_f"], img, g_recon, through)
        grad[c] += unstack_taps_fmajor(gz, cfg.taps.past_ff)

    if tape["ct_parts"]:
        ct_f = tape["ct_f"]
        g_recon = _fmajor(distance_grad(tape["closetalk"], breakdown.recon_closetalk))
        for c, row in enumerate(tape["ct_parts"]):
            gz = 0
            for d, (system, g, img) in enumerate(row):
                gz = gz + system.backward(g, ct_f[..., d:d + 1], img, g_recon[..., d:d + 1], through)
            grad[c] += unstack_taps_fmajor(gz, cfg.taps.past_ct)

    bad = ~np.isfinite(grad)
    if bad.any():
        c, t, f = np.argwhere(bad)[0]
        raise FloatingPointError(f"non-finite gradient at source {c}, frame {t}, frequency {f}")
    return grad


def frozen_filter_loss(breakdown: LossBreakdown, z) -> float:
    """Loss of new estimates z with every FCP filter held at the values in ``breakdown``.

    This is the function whose gradient ``mc_loss_backward(..., False)`` returns.
    """
    tape = breakdown.tape
    cfg: LossConfig = tape["cfg"]
    z = np.asarray(z, dtype=np.complex128)
    recon = 0
    for c, (_, g, _) in enumerate(tape["ff_parts"]):
        recon = recon + stack_taps_fmajor(z[c], *cfg.taps.farfield) @ g.conj()
    recon = np.transpose(recon, (2, 1, 0))
    farfield = tape["farfield"]
    total = cfg.alpha * sum(distance(farfield[p], recon[p]) for p in range(farfield.shape[0]))
    if tape["ct_parts"]:
        closetalk = tape["closetalk"]
        for d in range(closetalk.shape[0]):
            rec = 0
            for c, row in enumerate(tape["ct_parts"]):
                rec = rec + stack_taps_fmajor(z[c], *cfg.taps.closetalk) @ row[d][1].conj()
            total += distance(closetalk[d], rec[..., 0].T)
    return float(total)


@dataclass
class PitResult:
    loss: float
    perm: tuple[int, ...]   # estimate perm[c] is matched with reference c
    grad: np.ndarray        # (C, T, F) d loss / d z


def pit_loss(z, refs) -> PitResult:
    """Permutation-invariant sum of per-reference distances, with its gradient."""
    z, refs = np.asarray(z), np.asarray(refs)
    if z.shape != refs.shape:
        raise ValueError(f"shape mismatch: estimates {z.shape} vs references {refs.shape}")
    C = z.shape[0]
    pair = np.array([[distance(refs[c], z[e]) for e in range(C)] for c in range(C)])
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(C)):
        val = sum(pair[c, perm[c]] for c in range(C))
        if val < best:
            best, best_perm = val, perm
    grad = np.zeros_like(z, dtype=np.complex128)
    for c in range(C):
        grad[best_perm[c]] = distance_grad(refs[c], z[best_perm[c]])
    return PitResult(loss=float(best), perm=tuple(int(p) for p in best_perm), grad=grad)
