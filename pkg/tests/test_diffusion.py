import math

import numpy as np
import pytest

from semstyle.attention import self_attention
from semstyle.diffusion import (
    add_noise,
    analytic_denoiser,
    invert,
    make_schedule,
    replay,
    sample_step,
    toy_attention_denoiser,
)
from semstyle.errors import InvalidInputError, InvalidStateError, UnsupportedOperationError


@pytest.fixture(scope="module")
def toy():
    return toy_attention_denoiser(0, sites={"s8": (8, 8), "s16": (16, 16)})


@pytest.fixture
def z0():
    return np.random.default_rng(11).random((3, 16, 16)).astype(np.float32)


def test_schedule_defaults():
    s = make_schedule()
    assert (s.T, s.skip) == (50, 30)
    assert s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(0.02)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.betas > 0) & (s.betas < 1))


def test_schedule_single_step():
    s = make_schedule(1, 0)
    np.testing.assert_allclose(s.alpha_bars, [1 - 1e-4])


@pytest.mark.parametrize("T,skip", [(0, 0), (5, 5), (5, -1)])
def test_schedule_rejects(T, skip):
    with pytest.raises(InvalidInputError):
        make_schedule(T, skip)


def test_add_noise(z0):
    s = make_schedule(10, 0)
    assert s.alpha_bar(0) == 1.0
    np.testing.assert_array_equal(add_noise(z0, 0, np.ones_like(z0), s), z0)
    ab = s.alpha_bar(4)
    np.testing.assert_allclose(add_noise(z0, 4, np.zeros_like(z0), s), math.sqrt(ab) * z0, rtol=1e-6)
    noise = np.random.default_rng(0).normal(size=z0.shape).astype(np.float32)
    zt = add_noise(z0, 7, noise, s)
    ab = s.alpha_bar(7)
    back = (zt.astype(np.float64) - math.sqrt(1 - ab) * noise) / math.sqrt(ab)
    assert np.abs(back - z0).max() <= 1e-6
    with pytest.raises(InvalidInputError):
        add_noise(z0, 1, np.zeros((3, 4, 4)), s)


def test_analytic_denoiser_contract(z0):
    d = analytic_denoiser()
    assert not d.predict(z0, 3).any()
    assert d.attention_sites == {}
    with pytest.raises(UnsupportedOperationError):
        d.register_hook("any", lambda p, t: None)


def test_analytic_round_trip(z0):
    s = make_schedule(50, 0)
    d = analytic_denoiser()
    traj = invert(z0, d, s, seed=3)
    assert np.abs(replay(traj, d, s) - z0).max() <= 1e-6


def test_analytic_two_step_closed_form(z0):
    # with zero predicted noise: z_{t-1} = z_t / sqrt(1 - beta_t) + sqrt(beta_t) * r_t
    s = make_schedule(2, 0)
    d = analytic_denoiser()
    rng = np.random.default_rng(5)
    z2 = rng.normal(size=z0.shape).astype(np.float32)
    r2, r1 = (rng.normal(size=z0.shape).astype(np.float32) for _ in range(2))
    b1, b2 = 1e-4, 0.02
    expected = (z2 / math.sqrt(1 - b2) + math.sqrt(b2) * r2) / math.sqrt(1 - b1) + math.sqrt(b1) * r1
    got = sample_step(sample_step(z2, 2, d, r2, s), 1, d, r1, s)
    np.testing.assert_allclose(got, expected, atol=1e-5)


def test_sample_step_requires_residual(z0):
    with pytest.raises(InvalidStateError):
        sample_step(z0, 1, analytic_denoiser(), None, make_schedule(3, 0))


def test_toy_denoiser_properties(toy, z0):
    assert toy.attention_sites == {"s8": (8, 8), "s16": (16, 16)}
    out = toy.predict(z0, 5)
    assert out.shape == z0.shape and out.dtype == np.float32
    again = toy_attention_denoiser(0, sites={"s8": (8, 8), "s16": (16, 16)}).predict(z0, 5)
    np.testing.assert_array_equal(out, again)
    other = toy_attention_denoiser(1, sites={"s8": (8, 8), "s16": (16, 16)}).predict(z0, 5)
    assert not np.array_equal(out, other)


def test_toy_denoiser_shape_property():
    rng = np.random.default_rng(0)
    d = toy_attention_denoiser(2, sites=[16, 32])
    assert d.attention_sites == {"dec16": (16, 16), "dec32": (32, 32)}
    for shape in [(3, 32, 32), (3, 64, 128), (3, 16, 32)]:
        z = rng.normal(size=shape).astype(np.float32)
        assert d.predict(z, 10).shape == shape


def test_hook_registration_checks(toy):
    with pytest.raises(InvalidInputError):
        toy.register_hook("missing", lambda p, t: None)


def test_hook_neutrality(toy, z0):
    base = toy.predict(z0, 9)
    hooked = toy.predict(z0, 9, {"s8": lambda p, t: self_attention(p), "s16": lambda p, t: self_attention(p)})
    assert np.abs(hooked - base).max() <= 1e-6
    toy.register_hook("s16", lambda p, t: self_attention(p))
    try:
        assert np.abs(toy.predict(z0, 9) - base).max() <= 1e-6
    finally:
        toy.remove_hooks()


def test_hook_changes_output(toy, z0):
    base = toy.predict(z0, 9)
    zeroed = toy.predict(z0, 9, {"s16": lambda p, t: np.zeros((p.n, p.d))})
    assert np.abs(zeroed - base).max() > 0


def test_toy_round_trip_and_determinism(toy, z0):
    s = make_schedule(50, 0)
    a = invert(z0, toy, s, seed=4)
    assert np.abs(replay(a, toy, s) - z0).max() <= 1e-3
    b = invert(z0, toy, s, seed=4)
    for x, y in zip(a.latents, b.latents):
        np.testing.assert_array_equal(x, y)
    c = invert(z0, toy, s, seed=5)
    assert not np.array_equal(a.latents[-1], c.latents[-1])


def test_replay_matches_stored_latents(toy, z0):
    s = make_schedule(12, 0)
    traj = invert(z0, toy, s, seed=2)
    z = traj.latents[12]
    for t in range(12, 0, -1):
        z = sample_step(z, t, toy, traj.noise_residuals[t], s)
        assert np.abs(z - traj.latents[t - 1]).max() <= 1e-3


def test_projection_cache_and_upto(toy, z0):
    s = make_schedule(10, 4)
    traj = invert(z0, toy, s, seed=0, upto=s.start_step)
    assert set(traj.noise_residuals) == set(range(1, 7))
    assert set(traj.projections_cache) == {(n, t) for n in ("s8", "s16") for t in range(1, 7)}
    assert traj.projections_cache[("s16", 3)].n == 256
    full = invert(z0, toy, s, seed=0)
    np.testing.assert_array_equal(full.latents[10], traj.latents[10])


def test_skip_executes_remaining_steps(toy, z0, monkeypatch):
    s = make_schedule(10, 7)
    traj = invert(z0, toy, s, seed=0)
    seen = []
    original = toy.predict

    def spy(z, t, hooks=None):
        seen.append(t)
        return original(z, t, hooks)

    monkeypatch.setattr(toy, "predict", spy)
    out = replay(traj, toy, s, start=s.start_step)
    assert seen == [3, 2, 1]
    assert np.abs(out - z0).max() <= 1e-3
