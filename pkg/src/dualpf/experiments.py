"""End-to-end experiments: total-MSE sandwich, dual-effect A/B and terrain ambiguity."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import bounds as bd
from .config import CampaignSpec, build_filter_config, build_model
from .harness import campaign as run_campaign
from .harness import fixed_history, rough_zone_occupancy
from .oracle import regular_axes, run_grid_filter
from .particle_filter import FilterDivergence, SelectionWarning, filter_init, filter_step, run_filter
from .rng import stream
from .tan import default_sweep


# ---------------------------------------------------------------------------
# Total MSE
# ---------------------------------------------------------------------------


@dataclass
class TotalMseExperiment:
    rows: list[dict[str, Any]]
    gammas: np.ndarray
    n_bar: list[int]
    constants: list[bd.BoundConstants]
    expected_phi: np.ndarray
    failures: dict[int, int]


def total_mse_experiment(campaign: CampaignSpec, trajectories: int = 500,
                         n_values: Sequence[int] | None = None,
                         max_particles: int = 200_000) -> TotalMseExperiment:
    """Outer Monte Carlo of ``E||X_k - Xhat_k||^2`` for the oracle and particle estimates.

    ``gamma_k`` is the smallest oracle predicted mean likelihood seen over all
    trajectories; the filter selects against ``gamma_k / 2``. Uniform constants
    come from sup-norms over :func:`dualpf.tan.default_sweep`. The particle
    counts are ``n_values`` plus ``ceil(N_bar_k)`` for every k where that is
    at most ``max_particles``.
    """
    spec, _ = build_model(campaign)
    b = campaign.bounds
    eps, C_tilde, q = float(b.get("eps", 0.1)), float(b.get("C_tilde", 1.0)), float(b.get("q", 0.5))
    axes = regular_axes(campaign.oracle["lo"], campaign.oracle["hi"], campaign.oracle["counts"])
    auto = bool(campaign.oracle.get("auto_expand", False))
    K = campaign.horizon

    histories, oracles = [], []
    for t in range(trajectories):
        h = fixed_history(campaign, spec, trial=t)
        histories.append(h)
        oracles.append(run_grid_filter(spec, axes, h.observations, h.controls, auto_expand=auto))
    L = np.array([[s.mean_pred_likelihood for s in o] for o in oracles])
    gammas = L.min(axis=0)
    sq_star = np.array([[np.sum((h.states[k] - o[k].mean) ** 2) for k in range(K + 1)]
                        for h, o in zip(histories, oracles)])
    phi = np.array([bd.phi_norms([s.second_moments for s in o]) for o in oracles])
    expected_phi = np.mean(phi ** 2, axis=0)

    norms = bd.estimate_norms(spec, default_sweep(spec), bd.UNIFORM)
    consts = [bd.initial_constants(spec.state_dim, C_tilde, bd.UNIFORM, None, eps, gammas[0])]
    for k in range(1, K + 1):
        consts.append(bd.recurse_constants(consts[-1], norms, gammas[k], eps, C_tilde))
    n_bar = [c.n_threshold for c in consts]

    ns = sorted(set(n_values or campaign.n_sweep)
                | {n for n in n_bar[1:] if n <= max_particles})
    thresholds = 0.5 * gammas
    rows, failures = [], {}
    for N in ns:
        cfg = build_filter_config(campaign, N)
        sq_N, keep, failed = [], [], 0
        for t, h in enumerate(histories):
            rng = stream(campaign.base_seed, t, f"total/{N}")
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", SelectionWarning)
                    est, _ = run_filter(spec, h.observations, h.controls, cfg, rng, thresholds)
            except FilterDivergence:
                failed += 1
                continue
            sq_N.append(np.sum((h.states - est) ** 2, axis=1))
            keep.append(t)
        failures[N] = failed
        sq_N = np.array(sq_N)
        star = sq_star[keep]
        n_used = len(sq_N)
        for k in range(K + 1):
            diff = sq_N[:, k] - star[:, k]
            covered = N >= n_bar[k]
            upper = float("nan")
            if covered:
                _, upper = bd.total_bound(float(star[:, k].mean()), consts[k], expected_phi[k], N, q)
            rows.append({
                "k": k, "N": N,
                "e_tot_N": float(sq_N[:, k].mean()),
                "e_tot_N_se": float(sq_N[:, k].std(ddof=1) / np.sqrt(n_used)),
                "e_tot_star": float(star[:, k].mean()),
                "diff_se": float(diff.std(ddof=1) / np.sqrt(n_used)),
                "bound_upper": upper, "n_bar": n_bar[k], "covered": covered,
                "failed": failed,
            })
    return TotalMseExperiment(rows, gammas, n_bar, consts, expected_phi, failures)


# ---------------------------------------------------------------------------
# Dual effect
# ---------------------------------------------------------------------------


@dataclass
class ArmSummary:
    info_weight: float
    occupancy: np.ndarray
    terminal_sq_error: np.ndarray
    failures: int

    @property
    def mean_occupancy(self) -> float:
        return float(np.mean(self.occupancy))

    @property
    def mse(self) -> float:
        return float(np.mean(self.terminal_sq_error))

    @property
    def mse_se(self) -> float:
        e = self.terminal_sq_error
        return float(e.std(ddof=1) / np.sqrt(len(e)))


def run_arm(campaign: CampaignSpec, info_weight: float, workers: int = 1) -> ArmSummary:
    spec = campaign.replace(mpc={"info_weight": float(info_weight)}, controller="dual")
    records = run_campaign(spec, workers=workers)
    ok = [r for r in records if r.failure is None]
    split = spec.split_x if spec.split_x is not None else 1000.0
    # occupancy counts every run, up to its last recorded step
    occ = np.array([rough_zone_occupancy(r, split) if len(r.states()) else 0.0 for r in records])
    err = np.array([r.terminal["sq_error"] for r in ok])
    return ArmSummary(float(info_weight), occ, err, len(records) - len(ok))


def dual_effect_experiment(campaign: CampaignSpec, info_weight: float,
                           workers: int = 1) -> tuple[ArmSummary, ArmSummary]:
    """Same seeds, same planner; only the information weight differs between arms."""
    return run_arm(campaign, 0.0, workers), run_arm(campaign, info_weight, workers)


# ---------------------------------------------------------------------------
# Terrain ambiguity
# ---------------------------------------------------------------------------


@dataclass
class AmbiguityResult:
    cluster_mass: tuple[float, float]
    cluster_centres: np.ndarray
    gaussian_mean: np.ndarray
    gaussian_cov: np.ndarray
    gaussian_profile: np.ndarray
    gaussian_modes: int
    particle_profile: np.ndarray
    steps: int
    positions: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)


def _local_maxima(profile: np.ndarray) -> int:
    p = np.asarray(profile)
    inner = (p[1:-1] > p[:-2]) & (p[1:-1] >= p[2:])
    return int(inner.sum() + (p[0] > p[1]) + (p[-1] > p[-2]))


def ambiguity_experiment(campaign: CampaignSpec, split_x: float, steps: int = 3,
                         particles: int | None = None, trial: int = 0,
                         n_profile: int = 201) -> AmbiguityResult:
    """Filter ``steps`` observations and compare the cloud with its Gaussian summary.

    Clusters are the particles west and east of ``split_x``. The Gaussian
    summary (cloud mean and covariance) is evaluated along the segment between
    the two cluster centres and its local maxima are counted.
    """
    spec, _ = build_model(campaign)
    cfg = build_filter_config(campaign, particles)
    truth = stream(campaign.base_seed, trial, "truth")
    rng = stream(campaign.base_seed, trial, "filter")
    x = np.asarray(campaign.initial_state, dtype=float)
    u = np.zeros(spec.control_dim)
    pf, diag = filter_init(spec, spec.observation_sample(x, truth), cfg, rng)
    for _ in range(steps):
        x = spec.transition_sample(x[None, :], u, truth)[0]
        pf, diag = filter_step(pf, spec, u, spec.observation_sample(x, truth), cfg, rng)
    pos, w = pf.positions, pf.weights
    west = pos[:, 0] < split_x
    masses = (float(w[west].sum()), float(w[~west].sum()))
    centres = np.array([
        (w[west] @ pos[west]) / max(masses[0], 1e-300),
        (w[~west] @ pos[~west]) / max(masses[1], 1e-300),
    ])
    mean = w @ pos
    d = pos - mean
    cov = (w[:, None] * d).T @ d
    t = np.linspace(0.0, 1.0, n_profile)
    line = centres[0] + t[:, None] * (centres[1] - centres[0])
    cov_r = cov + 1e-9 * np.eye(len(mean))
    z = np.linalg.solve(cov_r, (line - mean).T)
    g_profile = np.exp(-0.5 * np.sum((line - mean).T * z, axis=0))
    # particle mass histogram projected on the same segment
    axis = centres[1] - centres[0]
    proj = (pos - centres[0]) @ axis / max(float(axis @ axis), 1e-300)
    hist, _ = np.histogram(proj, bins=20, range=(-0.25, 1.25), weights=w)
    return AmbiguityResult(masses, centres, mean, cov, g_profile, _local_maxima(g_profile),
                           hist, steps, pos, w)
