import numpy as np
import pytest

from dualpf.model import (ControlSet, History, QuadratureGrid, gauss_legendre_box, kernel_ks_statistic,
                          linear_gaussian_1d, simulate, trapezoid_grid, validate_model)
from dualpf.tan import tan_slice_model
from dualpf.terrain import two_hill_map

from conftest import with_likelihood


def _grid_1d(n=2001):
    nodes, w = trapezoid_grid(-10.0, 10.0, n)
    return QuadratureGrid(probe_states=np.array([[0.0], [1.5], [-2.0]]), probe_controls=np.zeros((1, 1)),
                          state_nodes=nodes, state_weights=w, obs_nodes=nodes, obs_weights=w)


def test_random_walk_densities_normalised(random_walk):
    report = validate_model(random_walk, _grid_1d())
    assert report.passed
    assert max(c.defect for c in report.checks) < 1e-6


def test_doubled_likelihood_fails_validation(random_walk):
    base = random_walk.likelihood
    spec = with_likelihood(random_walk, lambda y, s: 2.0 * base(y, s))
    report = validate_model(spec, _grid_1d())
    assert not report.passed
    obs_checks = [c for c in report.checks if c.name.startswith("likelihood")]
    assert all(abs(c.defect - 1.0) < 1e-6 for c in obs_checks)


def test_truncated_tan_noise_normalised():
    spec = tan_slice_model(two_hill_map(), track_y=500.0, altitude=300.0, speed=10.0,
                           q=4.0, sigma_h=2.0, noise_support_radius=3.0, m0=350.0)
    # Gauss-Legendre on the truncation support integrates the smooth part exactly enough
    obs_nodes, obs_w = gauss_legendre_box([-6.0], [6.0], 60)
    k_nodes, k_w = trapezoid_grid(-40.0, 40.0, 8001)
    grid = QuadratureGrid(probe_states=np.array([[300.0], [500.0], [700.0]]),
                          probe_controls=np.zeros((1, 1)), state_nodes=k_nodes, state_weights=k_w,
                          obs_nodes=obs_nodes, obs_weights=obs_w)
    report = validate_model(spec, grid)
    assert report.passed, str(report)


def test_negative_density_reported(random_walk):
    spec = with_likelihood(random_walk, lambda y, s: -np.ones(len(np.atleast_2d(s))))
    report = validate_model(spec, _grid_1d(101))
    assert not report.passed
    assert "negative density" in report.checks[-1].detail


def test_control_set_projection():
    cs = ControlSet(3, 2.0)
    u = cs.project([4.0, 0.0, 0.0])
    np.testing.assert_allclose(u, [2.0, 0.0, 0.0])
    assert cs.contains(u)
    assert not cs.contains([3.0, 0.0, 0.0])
    np.testing.assert_allclose(ControlSet(1).project([7.0]), [7.0])


def test_history_layout():
    h = History([np.zeros(1)])
    h.append(np.ones(1), np.ones(1))
    assert h.k == 1
    h.check()
    h.controls.append(np.ones(1))
    with pytest.raises(ValueError):
        h.check()


def test_kernel_sampler_matches_density(random_walk):
    ks = kernel_ks_statistic(random_walk, [0.5], [0.0], -10.0, 10.0, 20000, np.random.default_rng(1))
    # 1.63 / sqrt(n) is the 1% critical value of the KS statistic
    assert ks < 1.63 / np.sqrt(20000)


def test_simulate_shapes_and_determinism():
    spec = linear_gaussian_1d()
    ctrls = [np.zeros(1)] * 5
    s1, y1 = simulate(spec, ctrls, np.random.default_rng(3))
    s2, y2 = simulate(spec, ctrls, np.random.default_rng(3))
    assert s1.shape == (6, 1) and y1.shape == (6, 1)
    np.testing.assert_array_equal(s1, s2)
    np.testing.assert_array_equal(y1, y2)


def test_invalid_variances_rejected():
    with pytest.raises(ValueError):
        linear_gaussian_1d(r=0.0)
