import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mpdit.diffusion import (
    DiffusionSchedule,
    class_pattern,
    ddpm_noising,
    guided_noise,
    sample_cfg,
    synthetic_batch,
    synthetic_dataset,
)
from mpdit.model import DiT
from mpdit.tensor import expected_magnitude


def test_schedule_endpoints_and_monotonicity():
    s = DiffusionSchedule()
    abar = s.alpha_bar
    assert abar.shape == (257,) and abar[0] == 1.0
    assert np.all(np.diff(abar) < 0)
    assert 0 < abar[-1] < 1e-3
    # rescaling keeps the final noise level in the same regime for short schedules
    assert 0 < DiffusionSchedule(T=32).alpha_bar[-1] < 1e-2
    with pytest.raises(ValueError):
        DiffusionSchedule(T=0)
    with pytest.raises(ValueError):
        DiffusionSchedule(T=4)  # betas exceed 1 after rescaling


def test_noising_endpoints(rng):
    x0, eps = rng.standard_normal((2, 1, 4, 4)), rng.standard_normal((2, 1, 4, 4))
    np.testing.assert_array_equal(ddpm_noising(x0, 0, DiffusionSchedule(), eps), x0)
    np.testing.assert_array_equal(ddpm_noising(x0, [1, 1], np.array([1.0, 0.0]), eps), eps)
    with pytest.raises(ValueError):
        ddpm_noising(x0, 0, DiffusionSchedule(), eps[:1])


def test_noising_per_sample_levels(rng):
    x0, eps = rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2, 2))
    s = DiffusionSchedule()
    out = ddpm_noising(x0, [5, 100, 256], s, eps)
    for i, t in enumerate((5, 100, 256)):
        np.testing.assert_allclose(out[i], ddpm_noising(x0[i], t, s, eps[i]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 256))
def test_noising_preserves_magnitude(t):
    rng = np.random.default_rng(t)
    x0 = rng.standard_normal((64, 256))
    x0 /= expected_magnitude(x0)
    eps = rng.standard_normal(x0.shape)
    assert expected_magnitude(ddpm_noising(x0, t, DiffusionSchedule(), eps)) == pytest.approx(1.0, rel=0.02)


def test_guidance_endpoints_are_exact(rng):
    c, u = rng.standard_normal(5), rng.standard_normal(5)
    assert guided_noise(c, u, 1.0) is c
    assert guided_noise(c, u, 0.0) is u
    np.testing.assert_allclose(guided_noise(c, u, 5.0), u + 5 * (c - u))


def test_sampler_is_deterministic_and_shaped(tiny_cfg):
    model = DiT(tiny_cfg, seed=0)
    a = sample_cfg(model, 1, guidance_scale=3.0, steps=6, seed=7, num_images=2)
    b = sample_cfg(model, 1, guidance_scale=3.0, steps=6, seed=7, num_images=2)
    c = sample_cfg(model, 1, guidance_scale=3.0, steps=6, seed=8, num_images=2)
    assert a.shape == (2, 1, 8, 8)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.all(np.isfinite(a))


def test_full_length_sampling_stays_finite(tiny_cfg):
    model = DiT(tiny_cfg, seed=0)
    x = sample_cfg(model, 0, steps=tiny_cfg.diffusion_steps, seed=1)
    assert np.all(np.isfinite(x)) and x.std() > 0


def test_sampler_rejects_bad_arguments(tiny_cfg):
    model = DiT(tiny_cfg)
    with pytest.raises(ValueError):
        sample_cfg(model, tiny_cfg.num_classes)
    with pytest.raises(ValueError):
        sample_cfg(model, -1)
    with pytest.raises(ValueError):
        sample_cfg(model, 0, steps=0)
    with pytest.raises(ValueError):
        sample_cfg(model, 0, steps=tiny_cfg.diffusion_steps + 1)


def test_dataset_images_have_unit_magnitude():
    stream = synthetic_dataset(10, 16, seed=0)
    for _ in range(200):
        img, y = next(stream)
        assert img.shape == (1, 16, 16) and 0 <= y < 10
        assert abs(expected_magnitude(img) - 1.0) <= 1e-6


def test_dataset_labels_are_uniform():
    x, y = synthetic_batch(synthetic_dataset(8, 4, seed=3), 10_000)
    counts = np.bincount(y, minlength=8)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_dataset_is_seed_deterministic():
    a, ya = synthetic_batch(synthetic_dataset(4, 8, seed=5), 20)
    b, yb = synthetic_batch(synthetic_dataset(4, 8, seed=5), 20)
    c, _ = synthetic_batch(synthetic_dataset(4, 8, seed=6), 20)
    assert np.array_equal(a, b) and np.array_equal(ya, yb)
    assert not np.array_equal(a, c)


def test_classes_are_distinguishable():
    pats = [class_pattern(k, 4, 16, 0.0).ravel() for k in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert abs(np.dot(pats[i], pats[j])) / pats[i].size < 0.5
    assert class_pattern(1, 4, 8, 0.3, channels=3).shape == (3, 8, 8)
