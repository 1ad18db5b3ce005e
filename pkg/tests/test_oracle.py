from dataclasses import replace

import numpy as np
import pytest

from dualpf.model import linear_gaussian_1d
from dualpf.oracle import (GridDistribution, OracleError, conditional_mse, grid_correct, grid_predict,
                           kalman_1d, regular_axes, run_grid_filter, total_mse_monte_carlo)

from conftest import with_likelihood


def _shift_kernel(spec, shift, h):
    """Dirac kernel at x + shift, written as a density on a mesh of spacing h."""
    def density(z, x, u):
        d = np.atleast_2d(z)[:, 0] - np.atleast_2d(x)[:, 0] - shift
        return np.isclose(d, 0.0, atol=1e-9 * max(h, 1.0)) / h
    return replace(spec, transition_density=density)


def test_identity_kernel_keeps_distribution():
    axes = regular_axes([-5], [5], [101])
    spec = _shift_kernel(linear_gaussian_1d(), 0.0, 0.1)
    dist = GridDistribution.from_density(axes, lambda x: np.exp(-0.5 * x[:, 0] ** 2))
    out = grid_predict(dist, spec, np.zeros(1))
    np.testing.assert_allclose(out.masses, dist.masses, atol=1e-12)


def test_dirac_through_gaussian_kernel():
    spec = linear_gaussian_1d(a=1.0, b=1.0, q=0.5)
    axes = regular_axes([-10], [10], [2001])
    dist = GridDistribution.dirac(axes, [0.3])
    out = grid_predict(dist, spec, np.array([1.5]))
    mean, var = conditional_mse(out)
    h = out.spacing[0]
    assert abs(mean[0] - 1.8) < h
    # the pushforward of a Dirac is the kernel itself
    z = out.nodes[:, 0]
    expected = np.exp(-0.5 * (z - 1.8) ** 2 / 0.5)
    np.testing.assert_allclose(out.masses, expected / expected.sum(), atol=1e-9)
    assert var == pytest.approx(0.5, rel=1e-3)


def test_uniform_prior_shifted():
    h = 0.5
    axes = regular_axes([0], [10], [21])
    spec = _shift_kernel(linear_gaussian_1d(), 2.0, h)
    dist = GridDistribution(axes, np.full(21, 1 / 21))
    out = grid_predict(dist, spec, np.zeros(1))
    nodes = out.nodes[:, 0]
    # mass below 2 comes from outside the grid and is lost; the rest is uniform
    assert np.all(out.masses[nodes < 2.0 - 1e-9] == 0.0)
    kept = out.masses[nodes >= 2.0 - 1e-9]
    np.testing.assert_allclose(kept, 1.0 / len(kept))


def test_correct_constant_and_two_node():
    spec = linear_gaussian_1d()
    axes = regular_axes([0], [1], [2])
    dist = GridDistribution(axes, np.array([0.5, 0.5]))
    const = with_likelihood(spec, lambda y, s: np.full(len(s), 0.4))
    np.testing.assert_allclose(grid_correct(dist, const, np.zeros(1)).masses, [0.5, 0.5])
    two = with_likelihood(spec, lambda y, s: np.where(s[:, 0] < 0.5, 0.2, 0.6))
    np.testing.assert_allclose(grid_correct(dist, two, np.zeros(1)).masses, [0.25, 0.75])


def test_correct_vanishing_posterior_raises():
    spec = with_likelihood(linear_gaussian_1d(), lambda y, s: np.zeros(len(s)))
    dist = GridDistribution(regular_axes([0], [1], [2]), np.array([0.5, 0.5]))
    with pytest.raises(OracleError):
        grid_correct(dist, spec, np.zeros(1))


def test_conditional_mse_cases():
    axes = regular_axes([-1], [1], [3])
    mean, e = conditional_mse(GridDistribution.dirac(axes, [0.0]))
    assert e == 0.0 and mean[0] == 0.0
    mean, e = conditional_mse(GridDistribution(axes, np.array([0.5, 0.0, 0.5])))
    assert mean[0] == 0.0 and e == 1.0
    normal = GridDistribution.from_density(regular_axes([-10], [10], [2001]),
                                           lambda x: np.exp(-0.5 * x[:, 0] ** 2))
    assert abs(conditional_mse(normal)[1] - 1.0) < 1e-3


def test_two_dimensional_grid():
    axes = regular_axes([-1, -2], [1, 2], [3, 5])
    d = GridDistribution(axes, np.full(15, 1 / 15))
    mean, e = conditional_mse(d)
    np.testing.assert_allclose(mean, [0.0, 0.0], atol=1e-12)
    assert e == pytest.approx(2 / 3 + 2.0)


def test_grid_matches_kalman():
    p = dict(a=0.9, b=1.0, q=0.5, c=1.0, r=1.0, m0=0.0, p0=4.0)
    spec = linear_gaussian_1d(**p)
    rng = np.random.default_rng(3)
    from dualpf.model import simulate

    ctrls = list(0.3 * rng.normal(size=(10, 1)))
    _, obs = simulate(spec, ctrls, rng)
    axes = regular_axes([-20], [20], [2001])
    steps = run_grid_filter(spec, axes, obs, ctrls)
    km, kv = kalman_1d(**p, observations=obs, controls=ctrls)
    h = axes[0][1] - axes[0][0]
    for s, m, v in zip(steps, km, kv):
        assert abs(s.mean[0] - m) < h
        assert abs(s.e_star - v) / v < 1e-3
        assert 0 < s.mean_pred_likelihood and 0 < s.mean_post_likelihood


def test_auto_expand_follows_drift():
    spec = linear_gaussian_1d(a=1.0, b=1.0, q=0.5, m0=0.0, p0=1.0)
    axes = regular_axes([-5], [5], [401])
    obs = [np.array([6.0 * k]) for k in range(4)]
    ctrls = [np.array([6.0])] * 3
    # start the prior where the first observation is
    spec0 = replace(spec, initial_density=lambda s: np.exp(-0.5 * s[:, 0] ** 2))
    steps = run_grid_filter(spec0, axes, obs, ctrls, auto_expand=True)
    assert abs(steps[-1].mean[0] - 18.0) < 1.0
    try:
        fixed = run_grid_filter(spec0, axes, obs, ctrls, auto_expand=False)
        assert fixed[-1].mean[0] <= 5.0
    except OracleError:
        pass


def test_grid_validation():
    with pytest.raises(ValueError):
        GridDistribution((np.array([0.0, 1.0, 3.0]),), np.ones(3) / 3)
    with pytest.raises(ValueError):
        GridDistribution((np.linspace(0, 1, 3),), np.ones(4) / 4)


def _perfect_obs(spec):
    return replace(spec, observation_sample=lambda x, rng: np.asarray(x, dtype=float).copy())


def test_total_mse_perfect_estimator():
    spec = _perfect_obs(linear_gaussian_1d())
    res = total_mse_monte_carlo(spec, lambda k, obs: np.zeros(1), lambda y, u, r: y, 50, 5,
                                np.random.default_rng(0))
    np.testing.assert_array_equal(res.mean, np.zeros(6))
    assert res.trials_used == 50 and res.trials_failed == 0


def test_total_mse_zero_estimator_stationary():
    # stationary variance q / (1 - a^2) = 1
    spec = linear_gaussian_1d(a=0.9, q=0.19, m0=0.0, p0=1.0)
    res = total_mse_monte_carlo(spec, lambda k, obs: np.zeros(1),
                                lambda y, u, r: np.zeros((len(y), 1)), 4000, 4,
                                np.random.default_rng(1))
    assert np.all(np.abs(res.mean - 1.0) < 3 * res.se)


def test_total_mse_counts_failures():
    spec = linear_gaussian_1d()

    def flaky(y, u, r):
        if y[0, 0] > 0:
            raise FloatingPointError("boom")
        return np.zeros((len(y), 1))

    res = total_mse_monte_carlo(spec, lambda k, obs: np.zeros(1), flaky, 200, 2, np.random.default_rng(2))
    assert res.trials_failed > 0 and res.trials_used + res.trials_failed == 200
