import itertools

import numpy as np
import pytest

from m2m.fcp import TapConfig
from m2m.losses import (LossConfig, Mode, distance, distance_grad, frozen_filter_loss, mc_loss,
                        mc_loss_backward, pit_loss)


def crandn(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def instance(seed=0, C=2, P=3, T=14, F=5):
    rng = np.random.default_rng(seed)
    return crandn(rng, C, T, F), crandn(rng, C, T, F), crandn(rng, P, T, F)


SMALL = TapConfig(2, 1, 3, 1)


def test_distance_examples():
    y = np.array([[1.0 + 0j]])
    assert distance(y, y) == 0
    assert distance(y, np.zeros_like(y)) == pytest.approx(2.0)
    rng = np.random.default_rng(0)
    a, b = crandn(rng, 6, 4), crandn(rng, 6, 4)
    assert abs(distance(3.7 * a, 3.7 * b) - distance(a, b)) <= 1e-12
    with pytest.raises(ValueError):
        distance(a, b[:3])


def test_distance_silent_reference_is_finite():
    assert np.isfinite(distance(np.zeros((2, 2)), np.ones((2, 2))))


def test_distance_grad_subgradient_at_zero():
    y = np.array([[1.0 + 1.0j, 2.0]])
    g = distance_grad(y, np.zeros_like(y))
    # sign(0 - y) on Re/Im; magnitude term uses subgradient 0 at y_hat = 0
    np.testing.assert_allclose(g, np.array([[-1 - 1j, -1]]) / np.abs(y).sum())


def test_additivity_and_nonnegativity():
    z, ct, ff = instance()
    cfg = LossConfig(alpha=0.37, taps=SMALL)
    b = mc_loss(z, ct, ff, cfg)
    assert b.total == sum(b.per_closetalk) + 0.37 * sum(b.per_farfield)
    assert np.all(b.per_closetalk >= 0) and np.all(b.per_farfield >= 0)
    assert b.recon_farfield.shape == ff.shape and b.recon_closetalk.shape == ct.shape


def test_source_permutation_invariance():
    z, ct, ff = instance(1, C=3)
    cfg = LossConfig(taps=SMALL)
    base = mc_loss(z, ct, ff, cfg).total
    for perm in itertools.permutations(range(3)):
        assert abs(mc_loss(z[list(perm)], ct, ff, cfg).total - base) <= 1e-10 * base


def test_unssor_is_m2m_without_closetalk():
    z, ct, ff = instance(2)
    m2m = mc_loss(z, ct, ff, LossConfig(alpha=0.5, taps=SMALL))
    uns = mc_loss(z, None, ff, LossConfig(alpha=0.5, taps=SMALL, mode="unssor"))
    np.testing.assert_array_equal(uns.per_farfield, m2m.per_farfield)
    assert uns.per_closetalk.size == 0
    assert uns.total == pytest.approx(0.5 * m2m.per_farfield.sum(), rel=1e-14)
    with pytest.raises(ValueError):
        mc_loss(z, ct, ff, LossConfig(mode="pit"))


def test_copy_collapse_single_farfield():
    rng = np.random.default_rng(3)
    T, F = 30, 6
    y1 = crandn(rng, 1, T, F)
    ct = crandn(rng, 2, T, F)
    z = np.stack([y1[0], np.zeros((T, F), complex)])
    b = mc_loss(z, ct, y1, LossConfig(alpha=1.0))
    assert b.per_farfield[0] < 1e-6
    assert np.all(b.per_closetalk > 0.5)


def fd_check(z, fn, grad, rng, n=8, h=1e-4):
    errs = []
    for _ in range(n):
        c, t, f = (int(rng.integers(s)) for s in z.shape)
        for unit, part in ((1.0, np.real), (1j, np.imag)):
            zp, zm = z.copy(), z.copy()
            zp[c, t, f] += h * unit
            zm[c, t, f] -= h * unit
            fd = (fn(zp) - fn(zm)) / (2 * h)
            errs.append(abs(fd - part(grad[c, t, f])) / max(abs(fd), 1e-6))
    return max(errs)


@pytest.mark.parametrize("mode", ["m2m", "unssor"])
@pytest.mark.parametrize("through", [True, False])
def test_gradient_matches_finite_differences(mode, through):
    z, ct, ff = instance(4)
    cfg = LossConfig(alpha=0.8, taps=SMALL, mode=mode, grad_through_fcp=through)
    b = mc_loss(z, ct, ff, cfg)
    g = mc_loss_backward(b)
    if through:
        fn = lambda zz: mc_loss(zz, ct, ff, cfg).total
    else:
        fn = lambda zz: frozen_filter_loss(b, zz)
    assert abs(fn(z) - b.total) < 1e-12
    assert fd_check(z, fn, g, np.random.default_rng(5)) <= 1e-4


def test_fcp_path_is_live():
    z, ct, ff = instance(6)
    b = mc_loss(z, ct, ff, LossConfig(taps=SMALL))
    g1, g0 = mc_loss_backward(b, True), mc_loss_backward(b, False)
    assert np.max(np.abs(g1 - g0)) > 1e-3 * np.max(np.abs(g1))


def test_backward_without_tape():
    z, ct, ff = instance(7)
    b = mc_loss(z, ct, ff, LossConfig(taps=SMALL))
    b.tape = {}
    with pytest.raises(ValueError):
        mc_loss_backward(b)


def test_pit_examples():
    rng = np.random.default_rng(8)
    refs = crandn(rng, 2, 10, 4)
    r = pit_loss(refs, refs)
    assert r.loss == 0 and r.perm == (0, 1)
    swapped = pit_loss(refs[::-1], refs)
    assert swapped.loss == 0 and swapped.perm == (1, 0)
    z = crandn(rng, 2, 10, 4)
    brute = min(distance(refs[0], z[a]) + distance(refs[1], z[1 - a]) for a in (0, 1))
    assert pit_loss(z, refs).loss == pytest.approx(brute, rel=1e-14)
    with pytest.raises(ValueError):
        pit_loss(z, refs[:1])


def test_pit_gradient():
    rng = np.random.default_rng(9)
    refs, z = crandn(rng, 2, 8, 3), crandn(rng, 2, 8, 3)
    r = pit_loss(z, refs)
    fn = lambda zz: sum(distance(refs[c], zz[r.perm[c]]) for c in range(2))
    assert fd_check(z, fn, r.grad, rng, h=1e-6) <= 1e-4
