import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualpf.model import linear_gaussian_1d
from dualpf.oracle import GridDistribution, conditional_mse, grid_correct, regular_axes
from dualpf.particle_filter import (CORRECTED, PREDICTED, FilterConfig, FilterDivergence, ParticleSet,
                                    SelectionWarning, correct, effective_sample_size, empirical_mean,
                                    filter_init, filter_step, mean_likelihood, predict, resample,
                                    run_filter, select)
from dualpf.tan import TanParams, build_tan_model
from dualpf.terrain import flat_map

from conftest import with_likelihood


def _const_likelihood(spec, c):
    return with_likelihood(spec, lambda y, s: np.full(len(np.atleast_2d(s)), c))


# --- predict -----------------------------------------------------------------


def test_predict_deterministic_shift():
    spec = linear_gaussian_1d(a=1.0, b=1.0, q=0.0)
    pf = ParticleSet(np.array([[0.0], [1.0]]), np.array([0.3, 0.7]))
    out = predict(pf, spec, np.ones(1), np.random.default_rng(0))
    np.testing.assert_array_equal(out.positions, [[1.0], [2.0]])
    np.testing.assert_array_equal(out.weights, [0.3, 0.7])
    assert out.stage == PREDICTED


def test_predict_tan_double_integrator():
    params = TanParams(Q=np.zeros((6, 6)))
    spec = build_tan_model(flat_map(), params, np.zeros(6), np.eye(6))
    x = np.array([[10.0, 20.0, 30.0, 1.0, -2.0, 0.5]])
    out = predict(ParticleSet.uniform(x), spec, np.zeros(3), np.random.default_rng(0))
    np.testing.assert_allclose(out.positions[0, :3], [11.0, 18.0, 30.5])
    np.testing.assert_allclose(out.positions[0, 3:], [1.0, -2.0, 0.5])


def test_predict_variance_matches_kernel(random_walk):
    n = 100_000
    pf = ParticleSet.uniform(np.zeros((n, 1)))
    out = predict(pf, random_walk, np.zeros(1), np.random.default_rng(5))
    var = out.positions[:, 0].var(ddof=1)
    q = random_walk.params["q"]
    se = q * np.sqrt(2.0 / (n - 1))
    assert abs(var - q) < 3 * se


def test_predict_requires_corrected_cloud(random_walk):
    pf = ParticleSet.uniform(np.zeros((2, 1)), PREDICTED)
    with pytest.raises(ValueError):
        predict(pf, random_walk, np.zeros(1), np.random.default_rng(0))


# --- select ------------------------------------------------------------------


def test_select_zero_threshold_accepts(random_walk):
    pf = ParticleSet.uniform(np.array([[0.0], [1.0]]), PREDICTED)
    out, sel = select(pf, random_walk, np.array([0.5]), FilterConfig(gamma_threshold=0.0),
                      lambda r: pf, np.random.default_rng(0))
    assert sel.accepted and sel.redraw_count == 0 and out is pf


def test_select_unreachable_threshold_warns(random_walk):
    c = 0.3
    spec = _const_likelihood(random_walk, c)
    pf = ParticleSet.uniform(np.zeros((4, 1)), PREDICTED)
    cfg = FilterConfig(gamma_threshold=2 * c, max_redraws=5)
    with pytest.warns(SelectionWarning):
        _, sel = select(pf, spec, np.zeros(1), cfg, lambda r: pf, np.random.default_rng(0))
    assert not sel.accepted and sel.redraw_count == 5


def test_selection_raises_acceptance_rate():
    spec = linear_gaussian_1d(a=1.0, b=0.0, q=1.0, r=0.25, m0=0.0, p0=1.0)
    y = np.array([2.5])
    threshold = 0.1
    cfg = FilterConfig(particle_count=5, gamma_threshold=threshold, max_redraws=10)
    rng = np.random.default_rng(11)

    def spawn(r):
        return ParticleSet.uniform(spec.initial_sample(5, r), PREDICTED)

    base = sel_ok = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SelectionWarning)
        for _ in range(1000):
            first = spawn(rng)
            base += mean_likelihood(first, spec, y) > threshold
            _, sel = select(first, spec, y, cfg, spawn, rng)
            sel_ok += sel.accepted
    assert 50 < base < 700
    assert sel_ok > base


# --- correct -----------------------------------------------------------------


def test_correct_constant_likelihood_keeps_weights(random_walk):
    spec = _const_likelihood(random_walk, 0.7)
    pf = ParticleSet(np.array([[0.0], [1.0], [2.0]]), np.array([0.2, 0.3, 0.5]), PREDICTED)
    out = correct(pf, spec, np.zeros(1))
    np.testing.assert_allclose(out.weights, [0.2, 0.3, 0.5])
    assert out.stage == CORRECTED


def test_correct_two_particles(random_walk):
    spec = with_likelihood(random_walk, lambda y, s: np.where(np.atleast_2d(s)[:, 0] < 0.5, 0.2, 0.6))
    pf = ParticleSet.uniform(np.array([[0.0], [1.0]]), PREDICTED)
    np.testing.assert_allclose(correct(pf, spec, np.zeros(1)).weights, [0.25, 0.75])


def test_correct_all_zero_raises(random_walk):
    spec = _const_likelihood(random_walk, 0.0)
    pf = ParticleSet.uniform(np.zeros((3, 1)), PREDICTED)
    with pytest.raises(FilterDivergence):
        correct(pf, spec, np.zeros(1))


def test_corrected_mean_matches_grid_posterior():
    spec = linear_gaussian_1d(m0=0.0, p0=4.0, r=1.0)
    y = np.array([1.3])
    n = 10_000
    pf = ParticleSet.uniform(spec.initial_sample(n, np.random.default_rng(2)), PREDICTED)
    post = correct(pf, spec, y)
    est = empirical_mean(post)[0]
    var = post.weights @ (post.positions[:, 0] - est) ** 2
    se = np.sqrt(var / effective_sample_size(post.weights))
    grid = GridDistribution.from_density(regular_axes([-20], [20], [4001]), spec.initial_density)
    oracle_mean, _ = conditional_mse(grid_correct(grid, spec, y))
    assert abs(est - oracle_mean[0]) < 3 * se


# --- resample ----------------------------------------------------------------


def test_resample_uniform_weights_is_permutation():
    pos = np.arange(10.0)[:, None]
    out = resample(ParticleSet.uniform(pos), FilterConfig(), np.random.default_rng(0))
    np.testing.assert_array_equal(np.sort(out.positions[:, 0]), pos[:, 0])


def test_resample_degenerate_weights():
    pos = np.arange(5.0)[:, None]
    w = np.array([1.0, 0, 0, 0, 0])
    out = resample(ParticleSet(pos, w), FilterConfig(), np.random.default_rng(0))
    np.testing.assert_array_equal(out.positions[:, 0], np.zeros(5))
    np.testing.assert_allclose(out.weights, 0.2)


@pytest.mark.parametrize("scheme", ["systematic", "multinomial"])
def test_resample_unbiased(scheme):
    rng = np.random.default_rng(4)
    n, reps = 200, 1000
    pos = rng.normal(size=(n, 1))
    w = rng.random(n)
    w /= w.sum()
    pf = ParticleSet(pos, w)
    target = empirical_mean(pf)[0]
    sd = np.sqrt(w @ (pos[:, 0] - target) ** 2)
    cfg = FilterConfig(resampling_scheme=scheme)
    diffs = np.array([empirical_mean(resample(pf, cfg, rng))[0] - target for _ in range(reps)])
    assert np.mean(np.abs(diffs)) < 3 * sd / np.sqrt(n)
    assert abs(diffs.mean()) < 3 * diffs.std(ddof=1) / np.sqrt(reps) + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=30).filter(lambda w: sum(w) > 1e-6),
       st.integers(0, 2**32 - 1))
def test_systematic_counts_bracket_expected(weights, seed):
    w = np.array(weights) / sum(weights)
    n = len(w)
    pf = ParticleSet(np.arange(n, dtype=float)[:, None], w)
    out = resample(pf, FilterConfig(), np.random.default_rng(seed))
    counts = np.bincount(out.positions[:, 0].astype(int), minlength=n)
    assert counts.sum() == n
    assert np.all(counts >= np.floor(n * w - 1e-9)) and np.all(counts <= np.ceil(n * w + 1e-9))


# --- estimate ----------------------------------------------------------------


@pytest.mark.parametrize("pos, w, expected", [
    ([2.0], [1.0], 2.0),
    ([0.0, 4.0], [0.5, 0.5], 2.0),
    ([1.0, 2.0, 3.0], [0.2, 0.3, 0.5], 2.3),
])
def test_estimate(pos, w, expected):
    pf = ParticleSet(np.array(pos)[:, None], np.array(w))
    assert empirical_mean(pf)[0] == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(1e-3, 1.0)), min_size=1, max_size=20))
def test_estimate_inside_hull(pairs):
    pos = np.array([p for p, _ in pairs])[:, None]
    w = np.array([v for _, v in pairs])
    est = empirical_mean(ParticleSet(pos, w / w.sum()))[0]
    assert pos.min() - 1e-9 <= est <= pos.max() + 1e-9


# --- full step ---------------------------------------------------------------


def test_step_with_sharp_observation_tracks_truth():
    spec = linear_gaussian_1d(a=1.0, b=0.0, q=1.0, r=1e-4, m0=0.0, p0=1.0)
    rng = np.random.default_rng(8)
    x = np.array([0.4])
    cfg = FilterConfig(particle_count=5000)
    pf, diag = filter_init(spec, spec.observation_sample(x, rng), cfg, rng)
    for _ in range(5):
        x = spec.transition_sample(x[None, :], np.zeros(1), rng)[0]
        pf, diag = filter_step(pf, spec, np.zeros(1), spec.observation_sample(x, rng), cfg, rng)
        assert abs(diag.estimate[0] - x[0]) < 0.05


def test_step_constant_likelihood_is_predict_plus_resample():
    spec = _const_likelihood(linear_gaussian_1d(a=1.0, b=1.0, q=0.25), 0.5)
    n = 20_000
    rng = np.random.default_rng(9)
    pf = ParticleSet.uniform(rng.normal(size=(n, 1)))
    before = empirical_mean(pf)[0]
    out, diag = filter_step(pf, spec, np.array([2.0]), np.zeros(1), FilterConfig(particle_count=n), rng)
    se = np.sqrt((1.0 + 0.25) / n)
    assert abs(diag.estimate[0] - (before + 2.0)) < 3 * se
    assert diag.ess_before_resampling == pytest.approx(n)


def test_ess_after_resampling_is_n(random_walk):
    cfg = FilterConfig(particle_count=300)
    pf, diag = filter_init(random_walk, np.array([0.3]), cfg, np.random.default_rng(0))
    assert diag.effective_sample_size == pytest.approx(300)
    assert pf.size == 300


def test_run_filter_shapes_and_determinism(random_walk):
    obs = np.array([[0.1], [0.4], [0.2]])
    ctrls = np.zeros((2, 1))
    cfg = FilterConfig(particle_count=100)
    e1, d1 = run_filter(random_walk, obs, ctrls, cfg, np.random.default_rng(1))
    e2, _ = run_filter(random_walk, obs, ctrls, cfg, np.random.default_rng(1))
    assert e1.shape == (3, 1) and len(d1) == 3
    np.testing.assert_array_equal(e1, e2)
    with pytest.raises(ValueError):
        run_filter(random_walk, obs, np.zeros((3, 1)), cfg, np.random.default_rng(1))


def test_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(particle_count=0)
    with pytest.raises(ValueError):
        FilterConfig(gamma_threshold=-1.0)
    with pytest.raises(ValueError):
        FilterConfig(resampling_scheme="stratified-ish")
