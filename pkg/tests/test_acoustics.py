import numpy as np
import pytest

from m2m.acoustics import (SPEED_OF_SOUND, SceneSpec, closetalk_dominated, layout, mix_images,
                           pseudo_speech, sample_scene_spec, schroeder_t60, simulate_rir,
                           synthesize_scene)
from m2m.metrics import si_sdr

ROOM = (6.0, 5.0, 3.0)
SRC = np.array([2.0, 2.5, 1.5])
MIC = np.array([3.5, 2.0, 1.4])


def test_anechoic_single_impulse():
    h = simulate_rir(ROOM, None, SRC, MIC, length=800, reflection=0.0)
    dist = np.linalg.norm(SRC - MIC)
    assert np.argmax(np.abs(h)) == round(dist / SPEED_OF_SOUND * 8000)
    # the whole response is the one fractional-delay pulse
    assert np.sum(h ** 2) == pytest.approx(1 / (4 * np.pi * dist) ** 2, rel=0.05)


def test_inverse_distance_law():
    mic = SRC + np.array([0.5, 0.0, 0.0])
    far = SRC + np.array([1.0, 0.0, 0.0])
    a = simulate_rir(ROOM, None, SRC, mic, length=800, reflection=0.0)
    b = simulate_rir(ROOM, None, SRC, far, length=800, reflection=0.0)
    assert np.sqrt(np.sum(b ** 2) / np.sum(a ** 2)) == pytest.approx(0.5, rel=0.01)


def test_leading_delay_within_one_sample():
    h = simulate_rir(ROOM, 0.3, SRC, MIC)
    expect = np.linalg.norm(SRC - MIC) / SPEED_OF_SOUND * 8000
    assert abs(np.argmax(np.abs(h)) - expect) <= 1.0


@pytest.mark.parametrize("t60", [0.2, 0.3, 0.5])
def test_t60_within_twenty_percent(t60):
    h = simulate_rir(ROOM, t60, SRC, MIC)
    assert len(h) == int(np.ceil(t60 * 8000))
    assert 0.8 * t60 <= schroeder_t60(h, 8000) <= 1.2 * t60


def test_positions_outside_room_rejected():
    with pytest.raises(ValueError, match="outside"):
        simulate_rir(ROOM, 0.3, [7.0, 1.0, 1.0], MIC)
    with pytest.raises(ValueError, match="outside"):
        simulate_rir(ROOM, 0.3, SRC, [1.0, 1.0, -0.1])


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(t60_s=0.6)
    with pytest.raises(ValueError):
        SceneSpec(speaker_to_array_dist_m=(0.5, 1.5))
    with pytest.raises(ValueError):
        SceneSpec(closetalk_dist_m=(0.05, 0.2))
    with pytest.raises(ValueError):
        SceneSpec(noise_snr_db=10.0)
    with pytest.raises(ValueError):
        sample_scene_spec(np.random.default_rng(0), t60_range=(0.1, 0.3))
    spec = sample_scene_spec(np.random.default_rng(0))
    assert SceneSpec.from_dict(spec.to_dict()) == spec


def test_layout_geometry():
    spec = sample_scene_spec(np.random.default_rng(1))
    geom = layout(spec, np.random.default_rng(2))
    room = np.array(spec.room_dims_m)
    assert np.all(geom.mics > 0) and np.all(geom.mics < room)
    assert np.all(geom.speakers > 0) and np.all(geom.speakers < room)
    center = geom.farfield_mics.mean(axis=0)
    radii = np.linalg.norm(geom.farfield_mics - center, axis=1)
    np.testing.assert_allclose(radii, spec.array_diameter_m / 2, rtol=1e-9)
    gaps = np.linalg.norm(np.diff(geom.farfield_mics, axis=0, append=geom.farfield_mics[:1]), axis=1)
    np.testing.assert_allclose(gaps, gaps[0], rtol=1e-9)
    ct = np.linalg.norm(geom.closetalk_mics - geom.speakers, axis=1)
    np.testing.assert_allclose(ct, spec.closetalk_dist_m, rtol=1e-9)


@pytest.fixture(scope="module")
def scene():
    return synthesize_scene(sample_scene_spec(np.random.default_rng(3)), num_samples=8000)


def test_mixture_consistency(scene):
    assert np.array_equal(scene.mixtures, mix_images(scene.images, scene.noise))
    assert scene.mixtures.shape == (8, 8000)
    assert scene.farfield_mix.shape == (6, 8000) and scene.closetalk_mix.shape == (2, 8000)


def test_closetalk_dominance(scene):
    assert closetalk_dominated(scene.images, 6)
    energy = np.sum(scene.images.astype(np.float64) ** 2, axis=-1)
    assert energy[0, 6] > energy[1, 6] and energy[1, 7] > energy[0, 7]


def test_noise_level(scene):
    speech = scene.images.astype(np.float64).sum(0)
    snr = 10 * np.log10(np.sum(speech ** 2, -1) / np.sum(scene.noise.astype(np.float64) ** 2, -1))
    np.testing.assert_allclose(snr, scene.spec.noise_snr_db, atol=1e-3)


def test_determinism():
    spec = sample_scene_spec(np.random.default_rng(4))
    a, b = synthesize_scene(spec, num_samples=4000), synthesize_scene(spec, num_samples=4000)
    assert np.array_equal(a.mixtures, b.mixtures) and np.array_equal(a.images, b.images)


def test_noise_disabled():
    spec = SceneSpec(noise_snr_db=None, rng_seed=5)
    s = synthesize_scene(spec, num_samples=4000)
    assert np.array_equal(s.mixtures, mix_images(s.images, np.zeros_like(s.noise)))
    assert not np.any(s.noise)


def test_single_speaker_closetalk_quality():
    spec = SceneSpec(num_speakers=1, speaker_to_array_dist_m=(1.5,), closetalk_dist_m=(0.2,),
                     noise_snr_db=20.0, rng_seed=6)
    s = synthesize_scene(spec, num_samples=16000)
    np.testing.assert_array_equal(s.farfield_mix, s.images[0, :6] + s.noise[:6])
    assert si_sdr(s.closetalk_mix[0], s.images[0, 6]) >= 19.0


def test_user_sources_checked():
    spec = SceneSpec(rng_seed=7)
    with pytest.raises(ValueError):
        synthesize_scene(spec, sources=[np.ones(100), np.ones(120)])
    with pytest.raises(ValueError):
        synthesize_scene(spec, sources=[np.ones(100)])
    with pytest.raises(ValueError):
        synthesize_scene(spec)


def test_pseudo_speech():
    x = pseudo_speech(16000, 8000, np.random.default_rng(8))
    assert np.all(np.isfinite(x)) and np.sqrt(np.mean(x ** 2)) == pytest.approx(1.0)
    y = pseudo_speech(16000, 8000, np.random.default_rng(9))
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.2


@pytest.mark.parametrize("seed", range(40))
def test_pseudo_speech_short_is_not_silent(seed):
    x = pseudo_speech(800, 8000, np.random.default_rng(seed))
    assert np.all(np.isfinite(x)) and np.sum(x ** 2) > 0
