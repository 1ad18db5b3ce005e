"""Scenario-based receding-horizon control with an information cost.

The planner scores an open-loop control sequence by pushing the current
particle cloud through the dynamics (prediction only, no in-horizon
observations) and summing discounted stage costs

    alpha^t * ( <cloud_t, g^c(., u_t)> + lambda * info(cloud_t) ),   t = 0..H-1.

Open-loop rollouts lose the implicit dual effect; the ``lambda * info`` term is
what is left to reward informative trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import ModelSpec
from .particle_filter import ParticleSet
from .terrain import TerrainMap

RANDOM_SHOOTING = "random_shooting"
CROSS_ENTROPY = "cross_entropy"
INFO_KINDS = ("posterior_trace", "terrain_gradient_deficit", "none")


@dataclass(frozen=True)
class DualMpcConfig:
    horizon: int = 8
    discount: float = 1.0
    scenario_count: int = 4
    candidate_count: int = 64
    info_weight: float = 0.0
    optimizer: str = RANDOM_SHOOTING
    ce_iterations: int = 3
    ce_elite_fraction: float = 0.2
    scenario_noise: bool = True
    # cloud subsample used inside rollouts (None keeps every particle)
    rollout_particles: int | None = None
    # half-width of the sampling box when the control set is unconstrained
    control_scale: float = 1.0
    # share of candidates that repeat one control over the horizon
    constant_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.scenario_count < 1 or self.candidate_count < 1:
            raise ValueError("horizon, scenario_count and candidate_count must be >= 1")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.info_weight < 0:
            raise ValueError("info_weight must be nonnegative")
        if self.optimizer not in (RANDOM_SHOOTING, CROSS_ENTROPY):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.ce_iterations < 1 or not 0.0 < self.ce_elite_fraction <= 1.0:
            raise ValueError("ce_iterations >= 1 and ce_elite_fraction in (0, 1] required")
        if not 0.0 <= self.constant_fraction <= 1.0:
            raise ValueError("constant_fraction must lie in [0, 1]")
        if self.rollout_particles is not None and self.rollout_particles < 1:
            raise ValueError("rollout_particles must be positive")


@dataclass(frozen=True)
class InfoCostSpec:
    kind: str = "none"
    # epsilon_g in 1 / (epsilon_g + ||grad h||^2)
    floor: float = 0.1
    # state coordinates entering the cost; None means all for the trace and (0, 1) for the gradient
    coordinates: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in INFO_KINDS:
            raise ValueError(f"unknown info cost kind {self.kind!r}; choose from {INFO_KINDS}")
        if not self.floor > 0:
            raise ValueError("floor must be positive")


@dataclass
class PlannerDiagnostics:
    candidate_costs: np.ndarray
    best_index: int
    best_cost: float
    iterations: int
    outside_queries: int = 0
    plan: np.ndarray | None = None


def _positions_weights(cloud) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(cloud, ParticleSet):
        return cloud.positions, cloud.weights
    pos = np.atleast_2d(np.asarray(cloud, dtype=float))
    return pos, np.full(len(pos), 1.0 / len(pos))


def info_cost(cloud, info: InfoCostSpec, terrain: TerrainMap | None = None,
              return_outside: bool = False):
    """Information-loss surrogate for one belief cloud.

    ``posterior_trace`` is the weighted variance trace, which is exactly the
    minimum expected squared estimation error under the cloud.
    ``terrain_gradient_deficit`` averages ``1 / (floor + ||grad h||^2)`` over
    particles; gradient queries outside the map are clamped and counted.
    """
    pos, w = _positions_weights(cloud)
    outside = 0
    if info.kind == "none":
        value = 0.0
    elif info.kind == "posterior_trace":
        cols = list(range(pos.shape[1])) if info.coordinates is None else list(info.coordinates)
        p = pos[:, cols]
        mean = w @ p
        value = float(w @ np.sum((p - mean) ** 2, axis=1))
    else:
        if terrain is None:
            raise ValueError("terrain_gradient_deficit needs a terrain map")
        cols = [0, 1] if info.coordinates is None else list(info.coordinates)
        grad, out = terrain.gradient(pos[:, cols], return_outside=True)
        outside = int(out.sum())
        value = float(w @ (1.0 / (info.floor + np.sum(grad * grad, axis=1))))
    return (value, outside) if return_outside else value


def _rollout_cloud(cloud, cfg: DualMpcConfig, rng: np.random.Generator):
    pos, w = _positions_weights(cloud)
    m = cfg.rollout_particles
    if m is not None and m < len(pos):
        idx = rng.choice(len(pos), size=m, replace=True, p=w / w.sum())
        return pos[idx], np.full(m, 1.0 / m)
    return pos, w / w.sum()


def _scenario_costs(pos, w, plan, spec: ModelSpec, cfg: DualMpcConfig, info: InfoCostSpec,
                    terrain, rng, info_weight: float, noise: bool) -> tuple[np.ndarray, int]:
    """Discounted cost of ``plan`` for each of the ``S`` scenarios."""
    S, P = cfg.scenario_count if noise else 1, len(pos)
    x = np.tile(pos, (S, 1))
    costs = np.zeros(S)
    outside = 0
    for t, u in enumerate(plan):
        u = spec.control_set.project(u)
        gc = np.asarray(spec.cost_control(x, u), dtype=float).reshape(S, P) @ w
        stage = gc
        if info_weight > 0 and info.kind != "none":
            vals = np.empty(S)
            for s in range(S):
                v, o = info_cost(ParticleSet(x[s * P:(s + 1) * P], w), info, terrain, True)
                vals[s] = v
                outside += o
            stage = stage + info_weight * vals
        bad = ~np.isfinite(stage)
        if bad.any():
            raise FloatingPointError(f"non-finite stage cost in scenario {int(np.argmax(bad))} at step {t}")
        costs += cfg.discount ** t * stage
        if t + 1 < len(plan):
            if noise:
                x = spec.transition_sample(x, u, rng)
            elif spec.transition_mean is not None:
                x = spec.transition_mean(x, u)
            else:
                raise ValueError("noise-free rollout needs a model with transition_mean")
    return costs, outside


def evaluate_plan(cloud, plan: Sequence[np.ndarray], spec: ModelSpec, cfg: DualMpcConfig,
                  info: InfoCostSpec, terrain: TerrainMap | None, rng: np.random.Generator,
                  return_outside: bool = False):
    """Scenario-averaged open-loop cost of ``plan`` starting from ``cloud``."""
    plan = np.asarray(plan, dtype=float).reshape(-1, spec.control_dim)
    if len(plan) != cfg.horizon:
        raise ValueError(f"plan has {len(plan)} steps, horizon is {cfg.horizon}")
    pos, w = _rollout_cloud(cloud, cfg, rng)
    costs, outside = _scenario_costs(pos, w, plan, spec, cfg, info, terrain, rng,
                                     cfg.info_weight, cfg.scenario_noise)
    value = float(costs.mean())
    return (value, outside) if return_outside else value


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------


def sample_plans(spec: ModelSpec, cfg: DualMpcConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` plans drawn uniformly from the admissible set, shape ``(n, H, n_u)``.

    Plan 0 is the zero plan. The first ``ceil(constant_fraction * n)`` plans
    hold one uniformly drawn control for the whole horizon; the rest draw every
    step independently.
    """
    d, H = spec.control_dim, cfg.horizon
    r = spec.control_set.radius
    if r is None:
        plans = rng.uniform(-cfg.control_scale, cfg.control_scale, size=(n, H, d))
    else:
        g = rng.standard_normal((n, H, d))
        g /= np.linalg.norm(g, axis=2, keepdims=True)
        plans = g * (r * rng.random((n, H, 1)) ** (1.0 / d))
    n_const = int(np.ceil(cfg.constant_fraction * n))
    plans[:n_const] = plans[:n_const, :1]
    plans[0] = 0.0
    return plans


def _project_plans(spec: ModelSpec, plans: np.ndarray) -> np.ndarray:
    r = spec.control_set.radius
    if r is None:
        return plans
    norm = np.linalg.norm(plans, axis=2, keepdims=True)
    return np.where(norm > r, plans * (r / np.maximum(norm, 1e-300)), plans)


def _optimize(score, spec: ModelSpec, cfg: DualMpcConfig, rng: np.random.Generator,
              candidates: np.ndarray | None):
    plans = sample_plans(spec, cfg, cfg.candidate_count, rng) if candidates is None \
        else np.asarray(candidates, dtype=float).reshape(-1, cfg.horizon, spec.control_dim)
    iterations = 1 if cfg.optimizer == RANDOM_SHOOTING or candidates is not None else cfg.ce_iterations
    best_plan, best_cost, outside = None, np.inf, 0
    costs = np.array([])
    for it in range(iterations):
        costs = np.empty(len(plans))
        for i, p in enumerate(plans):
            costs[i], o = score(p)
            outside += o
        finite = np.isfinite(costs)
        if not finite.any():
            raise FloatingPointError("every candidate plan has non-finite cost")
        i = int(np.argmin(np.where(finite, costs, np.inf)))  # lowest index on ties
        if costs[i] < best_cost:
            best_plan, best_cost = plans[i], float(costs[i])
        if it + 1 < iterations:
            n_elite = max(1, int(np.ceil(cfg.ce_elite_fraction * len(plans))))
            elite = plans[np.argsort(np.where(finite, costs, np.inf), kind="stable")[:n_elite]]
            mu, sd = elite.mean(axis=0), elite.std(axis=0) + 1e-3
            plans = mu + sd * rng.standard_normal((cfg.candidate_count,) + mu.shape)
            plans = _project_plans(spec, plans)
            plans[0] = best_plan
    diag = PlannerDiagnostics(candidate_costs=costs, best_index=int(np.argmin(costs)),
                              best_cost=best_cost, iterations=iterations,
                              outside_queries=outside, plan=best_plan)
    return spec.control_set.project(best_plan[0]), diag


def plan(cloud, spec: ModelSpec, cfg: DualMpcConfig, info: InfoCostSpec,
         terrain: TerrainMap | None, rng: np.random.Generator,
         candidates: np.ndarray | None = None) -> tuple[np.ndarray, PlannerDiagnostics]:
    """First control of the best open-loop plan from the belief ``cloud``.

    Every candidate is scored on the same scenario noise (common random
    numbers), so cost differences come from the plans alone.
    """
    scenario_seed = int(rng.integers(2**63 - 1))
    pos, w = _rollout_cloud(cloud, cfg, np.random.default_rng(scenario_seed))

    def score(p):
        r = np.random.default_rng(scenario_seed + 1)
        c, o = _scenario_costs(pos, w, p, spec, cfg, info, terrain, r,
                               cfg.info_weight, cfg.scenario_noise)
        return float(c.mean()), o

    return _optimize(score, spec, cfg, rng, candidates)


def certainty_equivalent_plan(estimate: np.ndarray, spec: ModelSpec, cfg: DualMpcConfig,
                              rng: np.random.Generator,
                              candidates: np.ndarray | None = None) -> tuple[np.ndarray, PlannerDiagnostics]:
    """Same optimiser on noise-free rollouts of the point estimate, without the information term."""
    rng.integers(2**63 - 1)  # keep the rng in step with :func:`plan`
    x0 = np.atleast_2d(np.asarray(estimate, dtype=float))
    w = np.ones(1)
    info = InfoCostSpec("none")

    def score(p):
        c, _ = _scenario_costs(x0, w, p, spec, cfg, info, None, None, 0.0, False)
        return float(c[0]), 0

    return _optimize(score, spec, cfg, rng, candidates)
