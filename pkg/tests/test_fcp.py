import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m2m.fcp import (LOADING, FcpError, FcpSystem, TapConfig, compute_weights_ct,
                     compute_weights_ff, fcp_image, solve_fcp, stack_taps, stack_taps_fmajor,
                     unstack_taps)


def crandn(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def brute_force_filters(zs, y, lam):
    """Dense per-frequency solve with an explicit matrix inverse (same loading)."""
    T, K, F = zs.shape
    g = np.zeros((K, F), dtype=complex)
    for f in range(F):
        A = np.zeros((K, K), dtype=complex)
        b = np.zeros(K, dtype=complex)
        for t in range(T):
            v = zs[t, :, f]
            A += np.outer(v, v.conj()) / lam[t, f]
            b += v * np.conj(y[t, f]) / lam[t, f]
        A += LOADING * np.trace(A).real / K * np.eye(K)
        g[:, f] = np.linalg.inv(A) @ b
    return g


def test_tap_config_defaults_and_parse():
    cfg = TapConfig()
    assert (cfg.past_ct, cfg.future_ct, cfg.past_ff, cfg.future_ff) == (19, 1, 19, 1)
    assert TapConfig.parse("4,0,9,1") == TapConfig(4, 0, 9, 1)
    assert str(TapConfig.parse(str(cfg))) == str(cfg)
    with pytest.raises(ValueError):
        TapConfig.parse("1,2,3")
    with pytest.raises(ValueError):
        TapConfig(-1, 0, 0, 0)


def test_stack_identity_and_boundary():
    rng = np.random.default_rng(0)
    z = crandn(rng, 3, 4)
    assert np.array_equal(stack_taps(z, 0, 0)[:, 0, :], z)
    s = stack_taps(z, 1, 0)
    assert np.all(s[0, 0] == 0) and np.array_equal(s[0, 1], z[0])
    with pytest.raises(ValueError):
        stack_taps(z, -1, 0)


def test_stack_matches_loop():
    rng = np.random.default_rng(1)
    z = crandn(rng, 7, 5)
    past, future = 2, 1
    s = stack_taps(z, past, future)
    for t in range(7):
        for k in range(4):
            for f in range(5):
                src = t - past + k
                expect = z[src, f] if 0 <= src < 7 else 0
                assert s[t, k, f] == expect


def test_unstack_is_adjoint():
    rng = np.random.default_rng(2)
    z = crandn(rng, 9, 3)
    w = crandn(rng, 9, 5, 3)
    lhs = np.vdot(w, stack_taps(z, 3, 1))
    rhs = np.vdot(unstack_taps(w, 3), z)
    assert abs(lhs - rhs) < 1e-12


def test_weights_closetalk():
    y = np.zeros((3, 4), dtype=complex)
    y[1, 2] = 2.0
    lam = compute_weights_ct(y, 1e-4).lam
    assert lam[1, 2] == pytest.approx(4 * (1 + 1e-4))
    assert lam[0, 0] == pytest.approx(4e-4)
    assert compute_weights_ct(y).xi == 1e-4
    assert np.all(compute_weights_ct(np.zeros((3, 4))).lam == 1.0)
    with pytest.raises(ValueError):
        compute_weights_ct(y, 0.0)


def test_weights_farfield():
    rng = np.random.default_rng(3)
    y = crandn(rng, 1, 6, 5)
    np.testing.assert_allclose(compute_weights_ff(y, 1e-3).lam, compute_weights_ct(y[0], 1e-3).lam)
    two = np.zeros((2, 1, 1), dtype=complex)
    two[0, 0, 0], two[1, 0, 0] = 1.0, np.sqrt(3)
    assert compute_weights_ff(two).q[0, 0] == pytest.approx(2.0)
    stack = crandn(rng, 4, 5, 3)
    w = compute_weights_ff(stack, 1e-4)
    q = np.zeros((5, 3))
    for p in range(4):
        q += np.abs(stack[p]) ** 2 / 4
    np.testing.assert_allclose(w.q, q, rtol=1e-12)
    np.testing.assert_allclose(w.lam, 1e-4 * q.max() + q, rtol=1e-12)
    with pytest.raises(ValueError):
        compute_weights_ff([np.ones((2, 3)), np.ones((3, 3))])


def test_self_projection_is_one():
    rng = np.random.default_rng(4)
    y = crandn(rng, 20, 6)
    sol = solve_fcp(stack_taps(y, 0, 0), y, np.ones((20, 6)))
    np.testing.assert_allclose(sol.g, 1.0, atol=1e-9)


def test_recovers_subband_gain():
    rng = np.random.default_rng(5)
    z = crandn(rng, 50, 8)
    h = crandn(rng, 8)
    y = z * h
    sol = solve_fcp(stack_taps(z, 0, 0), y, compute_weights_ct(y))
    np.testing.assert_allclose(np.conj(sol.g[0]), h, rtol=1e-8)


def test_matches_brute_force():
    rng = np.random.default_rng(6)
    T, F = 6, 5
    z, y = crandn(rng, T, F), crandn(rng, T, F)
    lam = rng.uniform(0.1, 2.0, size=(T, F))
    zs = stack_taps(z, 1, 1)
    sol = solve_fcp(zs, y, lam)
    ref = brute_force_filters(zs, y, lam)
    assert np.max(np.abs(sol.g - ref)) / np.max(np.abs(ref)) <= 1e-10


def orthogonality_ratio(zs, y, lam, g):
    resid = y - np.einsum("kf,tkf->tf", g.conj(), zs)
    inner = np.einsum("tkf,tf->kf", zs, np.conj(resid) / lam)
    A = np.einsum("tkf,tjf->fkj", zs / lam[:, None, :], zs.conj())
    b = np.einsum("tkf,tf->kf", zs, np.conj(y) / lam)
    scale = np.linalg.norm(A, axis=(1, 2)) * np.linalg.norm(g, axis=0) + np.linalg.norm(b, axis=0)
    return np.max(np.linalg.norm(inner, axis=0) / scale)


def test_residual_orthogonality():
    rng = np.random.default_rng(7)
    T, F = 40, 30
    z, y = crandn(rng, T, F), crandn(rng, T, F)
    lam = compute_weights_ct(y).lam
    zs = stack_taps(z, 3, 1)
    assert orthogonality_ratio(zs, y, lam, solve_fcp(zs, y, lam).g) <= 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 4), st.integers(0, 2))
def test_more_taps_never_hurt(seed, past, future):
    rng = np.random.default_rng(seed)
    z, y = crandn(rng, 30, 4), crandn(rng, 30, 4)
    lam = compute_weights_ct(y).lam
    small = solve_fcp(stack_taps(z, past, future), y, lam).residual_energy
    big = solve_fcp(stack_taps(z, past + 1, future), y, lam).residual_energy
    assert np.all(big <= small * (1 + 1e-9))


def test_scaling_equivariance():
    rng = np.random.default_rng(8)
    z, y = crandn(rng, 25, 6), crandn(rng, 25, 6)
    lam = compute_weights_ct(y).lam
    zs = stack_taps(z, 2, 1)
    s = 0.3 - 1.7j
    a, b = solve_fcp(zs, y, lam), solve_fcp(s * zs, y, lam)
    np.testing.assert_allclose(b.g, a.g / np.conj(s), rtol=1e-9)
    img_a, img_b = fcp_image(a, zs), fcp_image(b, s * zs)
    assert np.max(np.abs(img_a - img_b)) <= 1e-10 * np.max(np.abs(img_a))


def test_frequency_permutation_equivariance():
    rng = np.random.default_rng(9)
    z, y = crandn(rng, 20, 7), crandn(rng, 20, 7)
    lam = rng.uniform(0.5, 1.5, size=(20, 7))
    perm = rng.permutation(7)
    zs = stack_taps(z, 2, 0)
    a = solve_fcp(zs, y, lam).g
    b = solve_fcp(zs[..., perm], y[:, perm], lam[:, perm]).g
    np.testing.assert_allclose(b, a[:, perm], rtol=1e-12, atol=1e-14)


def test_fcp_image_trivial_filters():
    rng = np.random.default_rng(10)
    z = crandn(rng, 5, 3)
    zs = stack_taps(z, 0, 0)
    np.testing.assert_array_equal(fcp_image(np.ones((1, 3)), zs), z)
    assert not np.any(fcp_image(np.zeros((1, 3)), zs))
    with pytest.raises(ValueError):
        fcp_image(np.ones((2, 3)), zs)


def test_silent_regressor_gives_zero_filter():
    y = crandn(np.random.default_rng(11), 10, 3)
    sol = solve_fcp(stack_taps(np.zeros((10, 3), complex), 2, 0), y, compute_weights_ct(y))
    assert np.all(np.isfinite(sol.g)) and not np.any(sol.g)


def test_singular_system_reports_frequency():
    zf = stack_taps_fmajor(np.ones((4, 3), complex), 0, 0)
    lam = np.ones((3, 4))
    lam[1, 0] = np.nan
    with pytest.raises(ValueError):
        FcpSystem(zf, lam)
    bad = zf.copy()
    bad[2] = np.nan
    with pytest.raises(FcpError) as err:
        FcpSystem(bad, np.ones((3, 4)), mic="far-field")
    assert err.value.freq == 2 and err.value.mic == "far-field"


def test_shape_errors():
    with pytest.raises(ValueError):
        solve_fcp(np.zeros((5, 1, 3)), np.zeros((4, 3)), np.ones((4, 3)))
    with pytest.raises(ValueError):
        solve_fcp(np.zeros((5, 1, 3)), np.zeros((5, 3)), -np.ones((5, 3)))
