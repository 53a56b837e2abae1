import numpy as np
import pytest
from hypothesis import given, strategies as st

from warmstart_nav.actions import ActionBounds, to_planner_space
from warmstart_nav.prior import (
    PriorStats, compute_prior, draw_policy_samples, transformed_samples, uninformed_init,
)
from warmstart_nav.sim import Instruction, Pose

BOUNDS = ActionBounds(np.array([-0.1, -0.3, -0.3, 0.9]), np.array([0.5, 0.3, 0.3, 1.0]))
START, GOAL = Pose(0.0, 0.0, 0.2), Pose(3.0, 1.0, 0.3)


def samples(n=4, noise=0.1, seed=0, instr="curve_left"):
    return draw_policy_samples(START, GOAL, Instruction(instr, 0.5), n, noise,
                               np.random.default_rng(seed))


def test_prior_matches_sample_oracle():
    s = samples()
    x = np.stack([to_planner_space(c, BOUNDS).values for c in s.chunks])
    prior = compute_prior(s, BOUNDS)
    np.testing.assert_allclose(prior.mu, x.sum(axis=0) / 4, atol=1e-15)
    pop_std = np.sqrt(((x - x.mean(axis=0)) ** 2).sum(axis=0) / 4)
    np.testing.assert_allclose(prior.sigma, np.clip(pop_std, 0.01, 0.05), atol=1e-15)


def test_single_sample_has_floor_sigma():
    prior = compute_prior(samples(n=1), BOUNDS)
    np.testing.assert_array_equal(prior.sigma, 0.01)


def test_noise_free_samples_collapse_to_floor():
    prior = compute_prior(samples(noise=0.0), BOUNDS)
    np.testing.assert_array_equal(prior.sigma, 0.01)
    single = to_planner_space(samples(n=1, noise=0.0).chunks[0], BOUNDS).values
    np.testing.assert_allclose(prior.mu, single, atol=1e-15)


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_sigma_always_clamped(seed, noise):
    prior = compute_prior(samples(seed=seed, noise=noise), BOUNDS)
    assert np.all(prior.sigma >= 0.01) and np.all(prior.sigma <= 0.05)
    assert np.all(np.abs(prior.mu) <= 1.0)


def test_transform_happens_before_averaging():
    """Averaging raw global chunks first would give a different mean."""
    s = samples(noise=0.3, seed=2)
    prior = compute_prior(s, BOUNDS)
    raw_mean = np.mean([c.values for c in s.chunks], axis=0)
    from warmstart_nav.actions import ActionChunk, Frame
    naive = to_planner_space(ActionChunk(raw_mean, Frame.GLOBAL), BOUNDS).values
    assert not np.allclose(prior.mu, naive, atol=1e-6)


def test_uninformed_init():
    u = uninformed_init(8)
    assert u.mu.shape == (8, 4) and np.all(u.mu == 0) and np.all(u.sigma == 0.05)
    assert u.source == "uninformed"


def test_bad_inputs():
    with pytest.raises(ValueError):
        draw_policy_samples(START, GOAL, Instruction("straight"), 0, 0.1, np.random.default_rng())
    with pytest.raises(TypeError):
        transformed_samples(samples(), None)
    with pytest.raises(ValueError):
        compute_prior(samples(), BOUNDS, sigma_min=0.1, sigma_max=0.05)
    with pytest.raises(ValueError, match="shape"):
        PriorStats.from_dict({"mu": [[0, 0, 0, 0]], "sigma": [[1, 1]]})


def test_prior_round_trip():
    p = compute_prior(samples(), BOUNDS)
    q = PriorStats.from_dict(p.to_dict())
    np.testing.assert_array_equal(q.mu, p.mu)
    np.testing.assert_array_equal(q.sigma, p.sigma)
