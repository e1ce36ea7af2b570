"""Forward convolutive prediction (FCP).

For a source estimate z and a mixture y at some microphone, FCP finds the
per-frequency multi-tap filter g minimising

    sum_t |y(t, f) - g(f)^H z~(t, f)|^2 / lambda(t, f)

where z~(t, f) = [z(t - past, f), ..., z(t + future, f)] (zero outside the
utterance). The filtered estimate g^H z~ is the "FCP image" of the source at
that microphone.

Arrays use the layout (..., T, F) for spectrograms and (..., T, K, F) for
stacked taps, K = past + 1 + future. Conjugation convention: ``g^H z~`` is
``sum_k conj(g_k) z~_k`` and the normal equations are A g = b with
A = sum_t z~ z~^H / lambda, b = sum_t z~ conj(y) / lambda.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_XI = 1e-4
LOADING = 1e-10
# absolute floor on the loading, only active when z is identically zero
_LOADING_FLOOR = 1e-300


class FcpError(RuntimeError):
    """Raised when a normal-equation system cannot be solved."""

    def __init__(self, message, mic=None, freq=None):
        super().__init__(message)
        self.mic = mic
        self.freq = freq


@dataclass(frozen=True)
class TapConfig:
    past_ct: int = 19
    future_ct: int = 1
    past_ff: int = 19
    future_ff: int = 1

    def __post_init__(self):
        for name in ("past_ct", "future_ct", "past_ff", "future_ff"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")

    @classmethod
    def parse(cls, text: str) -> "TapConfig":
        """From an ``I,J,M,N`` (or ``I/J/M/N``) string."""
        parts = text.replace("/", ",").split(",")
        if len(parts) != 4:
            raise ValueError(f"expected four tap counts I,J,M,N, got {text!r}")
        return cls(*(int(p) for p in parts))

    def __str__(self):
        return f"{self.past_ct}/{self.future_ct}/{self.past_ff}/{self.future_ff}"

    @property
    def closetalk(self) -> tuple[int, int]:
        return self.past_ct, self.future_ct

    @property
    def farfield(self) -> tuple[int, int]:
        return self.past_ff, self.future_ff


@dataclass(frozen=True)
class FcpWeights:
    lam: np.ndarray       # (T, F), strictly positive
    xi: float = DEFAULT_XI
    q: np.ndarray | None = None  # average far-field power, far-field weights only


@dataclass
class FcpSolution:
    g: np.ndarray                # (..., K, F) filters
    residual_energy: np.ndarray  # (..., F) weighted residual sum_t |e|^2 / lambda
    condition_diag: np.ndarray   # (..., F) max/min diagonal ratio of the loaded A
    past: int = 0
    future: int = 0


def stack_taps(z: np.ndarray, past: int, future: int) -> np.ndarray:
    """(..., T, F) -> (..., T, past + 1 + future, F), entry (t, k) = z(t - past + k)."""
    if past < 0 or future < 0:
        raise ValueError("tap counts must be non-negative")
    z = np.asarray(z)
    if z.ndim < 2 or z.shape[-2] < 1:
        raise ValueError("need at least one frame")
    T = z.shape[-2]
    K = past + 1 + future
    out = np.zeros(z.shape[:-2] + (T, K) + z.shape[-1:], dtype=z.dtype)
    for k in range(K):
        shift = k - past
        lo, hi = max(0, -shift), min(T, T - shift)
        if lo < hi:
            out[..., lo:hi, k, :] = z[..., lo + shift:hi + shift, :]
    return out


def unstack_taps(grad: np.ndarray, past: int) -> np.ndarray:
    """Adjoint of :func:`stack_taps`: (..., T, K, F) -> (..., T, F)."""
    T, K = grad.shape[-3], grad.shape[-2]
    out = np.zeros(grad.shape[:-3] + (T,) + grad.shape[-1:], dtype=grad.dtype)
    for k in range(K):
        shift = k - past
        lo, hi = max(0, -shift), min(T, T - shift)
        if lo < hi:
            out[..., lo + shift:hi + shift, :] += grad[..., lo:hi, k, :]
    return out


def _floored(power: np.ndarray, xi: float) -> np.ndarray:
    peak = power.max()
    if peak <= 0:
        # silent mixture: relative floor is zero, fall back to uniform weights
        return np.ones_like(power)
    return xi * peak + power


def compute_weights_ct(y_d: np.ndarray, xi: float = DEFAULT_XI) -> FcpWeights:
    """lambda = xi * max|Y_d|^2 + |Y_d|^2 for a close-talk mic, y_d is (T, F)."""
    if not xi > 0:
        raise ValueError("xi must be positive")
    power = np.abs(np.asarray(y_d)) ** 2
    return FcpWeights(lam=_floored(power, xi), xi=xi)


def compute_weights_ff(farfield: np.ndarray, xi: float = DEFAULT_XI) -> FcpWeights:
    """lambda = xi * max(Q) + Q with Q the mean far-field power; farfield is (P, T, F)."""
    if not xi > 0:
        raise ValueError("xi must be positive")
    if isinstance(farfield, (list, tuple)):
        shapes = {np.shape(y) for y in farfield}
        if len(shapes) != 1:
            raise ValueError(f"far-field spectrograms differ in shape: {sorted(shapes)}")
    farfield = np.asarray(farfield)
    if farfield.ndim != 3 or farfield.shape[0] < 1:
        raise ValueError("expected a (P, T, F) stack with P >= 1")
    q = np.mean(np.abs(farfield) ** 2, axis=0)
    return FcpWeights(lam=_floored(q, xi), xi=xi, q=q)


def _lam_array(weights) -> np.ndarray:
    lam = weights.lam if isinstance(weights, FcpWeights) else np.asarray(weights)
    if np.any(~(lam > 0)):
        raise ValueError("FCP weights must be strictly positive")
    return lam


def stack_taps_fmajor(z: np.ndarray, past: int, future: int) -> np.ndarray:
    """(T, F) spectrogram -> (F, T, K) stacked taps, the layout the solver works in."""
    return np.ascontiguousarray(np.transpose(stack_taps(z, past, future), (2, 0, 1)))


def unstack_taps_fmajor(grad: np.ndarray, past: int) -> np.ndarray:
    """Adjoint of :func:`stack_taps_fmajor`: (F, T, K) -> (T, F)."""
    return unstack_taps(np.transpose(grad, (1, 2, 0)), past)


def _fail(f: int, mic, what: str):
    where = f" (mic {mic})" if mic is not None else ""
    return FcpError(f"FCP normal equations {what} at frequency {f}{where}", mic=mic, freq=f)


def _cholesky(A: np.ndarray, mic=None) -> np.ndarray:
    bad = ~np.isfinite(A).all(axis=(-2, -1))
    if bad.any():
        raise _fail(int(np.argmax(bad)), mic, "are not finite")
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        for f, a in enumerate(A):
            try:
                np.linalg.cholesky(a)
            except np.linalg.LinAlgError:
                raise _fail(f, mic, "are not positive definite") from None
        raise


def _chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve (L L^H) x = b for batched L (F, K, K) and b (F, K, R)."""
    y = np.linalg.solve(L, b)
    return np.linalg.solve(np.swapaxes(L, -1, -2).conj(), y)


class FcpSystem:
    """Loaded, Cholesky-factored normal matrix for one regressor and one weighting.

    Works in frequency-major layout: stacked regressor ``zf`` is (F, T, K),
    weights and mixtures are (F, T) / (F, T, R). Several mixtures can share
    one system (all far-field mics share their weights), so A is factored
    once and reused for every right-hand side.
    """

    def __init__(self, zf: np.ndarray, lam_ft: np.ndarray, mic=None):
        if np.any(~(lam_ft > 0)):
            raise ValueError("FCP weights must be strictly positive")
        self.zf = zf
        self.inv_lam = 1.0 / lam_ft
        K = zf.shape[-1]
        zw = zf * self.inv_lam[..., None]
        A = np.swapaxes(zw, -1, -2) @ zf.conj()          # (F, K, K)
        self.A = A
        self.trace = np.trace(A, axis1=-2, axis2=-1).real
        self.eps = np.maximum(LOADING * self.trace / K, _LOADING_FLOOR)
        self.A_loaded = A + self.eps[:, None, None] * np.eye(K)
        self.chol = _cholesky(self.A_loaded, mic)

    def solve(self, yf: np.ndarray) -> np.ndarray:
        """Filters for mixtures yf (F, T, R) -> g (F, K, R)."""
        b = np.swapaxes(self.zf, -1, -2) @ (yf.conj() * self.inv_lam[..., None])
        return _chol_solve(self.chol, b)

    def image(self, g: np.ndarray) -> np.ndarray:
        """g^H z~ for g (F, K, R) -> (F, T, R)."""
        return self.zf @ g.conj()

    def backward(self, g: np.ndarray, yf: np.ndarray, image: np.ndarray,
                 grad_image: np.ndarray, through_solve: bool = True) -> np.ndarray:
        """Gradient w.r.t. the stacked regressor given the gradient w.r.t. the image.

        Gradients of a real loss are carried as dL/dRe + i dL/dIm. With
        u = sum_t z~ conj(G_X) and v = A^{-1} u, the closed-form solve adds

            lambda^{-1} [ e v - (v^H z~) g ] - 2 (delta / K) Re(v^H g) lambda^{-1} z~

        to the direct path G_X g (e = y - image is the residual; the last term
        is the derivative of the trace-proportional loading).
        All arrays frequency-major; returns (F, T, K).
        """
        grad_z = grad_image @ np.swapaxes(g, -1, -2)
        if not through_solve:
            return grad_z
        zf = self.zf
        K = zf.shape[-1]
        u = np.swapaxes(zf, -1, -2) @ grad_image.conj()   # (F, K, R)
        v = _chol_solve(self.chol, u)
        vz = zf @ v.conj()                                # (F, T, R)
        lhs = np.concatenate([yf - image, -vz], axis=-1) * self.inv_lam[..., None]
        rhs = np.swapaxes(np.concatenate([v, g], axis=-1), -1, -2)
        grad_z += lhs @ rhs
        active = LOADING * self.trace / K >= _LOADING_FLOOR
        coef = np.real(np.sum(v.conj() * g, axis=(-2, -1))) * active   # (F,)
        grad_z -= (2 * LOADING / K) * (coef[:, None] * self.inv_lam)[..., None] * zf
        return grad_z


def apply_filter(g: np.ndarray, z_stacked: np.ndarray) -> np.ndarray:
    """FCP image g^H z~: g (..., K, F), z~ (T, K, F) -> (..., T, F)."""
    return np.einsum("...kf,tkf->...tf", g.conj(), z_stacked)


def solve_fcp(z_stacked: np.ndarray, y_r: np.ndarray, weights, past: int = 0,
              future: int = 0, mic=None) -> FcpSolution:
    """Weighted least-squares FCP filter for one regressor and one (or several) mixtures.

    z_stacked: (T, K, F); y_r: (T, F) or (R, T, F) sharing the same weights.
    Returns g as (K, F), or (R, K, F) for several mixtures.
    """
    z_stacked = np.asarray(z_stacked, dtype=np.complex128)
    y = np.asarray(y_r, dtype=np.complex128)
    single = y.ndim == 2
    if single:
        y = y[None]
    if z_stacked.ndim != 3 or y.shape[1:] != (z_stacked.shape[0], z_stacked.shape[2]):
        raise ValueError(f"shape mismatch: stacked {z_stacked.shape} vs mixture {np.shape(y_r)}")
    lam = _lam_array(weights)
    if lam.shape != y.shape[1:]:
        raise ValueError(f"weights shape {lam.shape} does not match mixture {y.shape[1:]}")
    system = FcpSystem(np.ascontiguousarray(np.transpose(z_stacked, (2, 0, 1))), lam.T, mic)
    yf = np.transpose(y, (2, 1, 0))
    gf = system.solve(yf)                               # (F, K, R)
    resid = yf - system.image(gf)
    residual_energy = np.sum(np.abs(resid) ** 2 * system.inv_lam[..., None], axis=1).T  # (R, F)
    diag = np.real(np.diagonal(system.A_loaded, axis1=-2, axis2=-1))
    cond = diag.max(-1) / diag.min(-1)
    g = np.transpose(gf, (2, 1, 0))
    if single:
        g, residual_energy = g[0], residual_energy[0]
    return FcpSolution(g=g, residual_energy=residual_energy,
                       condition_diag=np.broadcast_to(cond, residual_energy.shape).copy(),
                       past=past, future=future)


def fcp_image(solution: FcpSolution | np.ndarray, z_stacked: np.ndarray) -> np.ndarray:
    """The filtered estimate g^H z~ (the FCP-estimated image)."""
    g = solution.g if isinstance(solution, FcpSolution) else np.asarray(solution)
    z_stacked = np.asarray(z_stacked)
    if g.shape[-2:] != z_stacked.shape[-2:]:
        raise ValueError(f"filter shape {g.shape} does not match stacked input {z_stacked.shape}")
    return apply_filter(g, z_stacked)
