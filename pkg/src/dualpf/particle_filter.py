"""Particle filter with a likelihood-threshold selection step.

One step is predict -> select -> correct -> resample. Selection re-propagates
the whole predicted cloud from the previous corrected cloud until its mean
likelihood under the new observation exceeds ``gamma_threshold``, which is
how the filter manufactures the high-likelihood event the MSE bounds need.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .model import ModelSpec

PREDICTED = "predicted"
CORRECTED = "corrected"


class FilterDivergence(RuntimeError):
    """Every particle has zero likelihood under the current observation."""


class SelectionWarning(UserWarning):
    """No predicted cloud reached the likelihood threshold."""


@dataclass(frozen=True)
class ParticleSet:
    positions: np.ndarray
    weights: np.ndarray
    stage: str = CORRECTED

    def __post_init__(self) -> None:
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if pos.shape[0] < 1 or pos.shape[0] != w.shape[0]:
            raise ValueError("positions and weights must have the same, positive length")
        if (w < 0).any():
            raise ValueError("weights must be nonnegative")
        if self.stage not in (PREDICTED, CORRECTED):
            raise ValueError(f"unknown stage {self.stage!r}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def uniform(cls, positions: np.ndarray, stage: str = CORRECTED) -> "ParticleSet":
        pos = np.atleast_2d(np.asarray(positions, dtype=float))
        n = pos.shape[0]
        return cls(pos, np.full(n, 1.0 / n), stage)


@dataclass(frozen=True)
class FilterConfig:
    particle_count: int = 1000
    gamma_threshold: float = 0.0
    max_redraws: int = 10
    resampling_scheme: str = "systematic"

    def __post_init__(self) -> None:
        if self.particle_count < 1:
            raise ValueError("particle_count must be >= 1")
        if self.gamma_threshold < 0:
            raise ValueError("gamma_threshold must be nonnegative")
        if self.max_redraws < 1:
            raise ValueError("max_redraws must be >= 1")
        if self.resampling_scheme not in ("systematic", "multinomial"):
            raise ValueError(f"unknown resampling scheme {self.resampling_scheme!r}")


class Selection(NamedTuple):
    redraw_count: int
    accepted: bool
    mean_likelihood: float


@dataclass
class StepDiagnostics:
    mean_predicted_likelihood: float
    redraw_count: int
    selection_accepted: bool
    ess_before_resampling: float
    effective_sample_size: float
    estimate: np.ndarray


def effective_sample_size(weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / np.dot(w, w))


def empirical_mean(pf: ParticleSet) -> np.ndarray:
    """Weighted mean of the cloud, the particle estimate of the conditional mean."""
    return pf.weights @ pf.positions


def mean_likelihood(pf: ParticleSet, spec: ModelSpec, observation: np.ndarray) -> float:
    return float(pf.weights @ spec.likelihood(observation, pf.positions))


def predict(pf: ParticleSet, spec: ModelSpec, control: np.ndarray,
            rng: np.random.Generator) -> ParticleSet:
    if pf.stage != CORRECTED:
        raise ValueError("predict expects a corrected cloud")
    u = spec.control_set.project(control)
    moved = np.asarray(spec.transition_sample(pf.positions, u, rng), dtype=float)
    bad = ~np.isfinite(moved).all(axis=1)
    if bad.any():
        raise FloatingPointError(f"non-finite propagated position at particle {int(np.argmax(bad))}")
    return ParticleSet(moved, pf.weights.copy(), PREDICTED)


def select(pf: ParticleSet, spec: ModelSpec, observation: np.ndarray, cfg: FilterConfig,
           spawn: Callable[[np.random.Generator], ParticleSet], rng: np.random.Generator,
           threshold: float | None = None) -> tuple[ParticleSet, Selection]:
    """Accept the predicted cloud or redraw it until its mean likelihood clears the threshold.

    When every redraw fails the best-scoring cloud is returned with
    ``accepted=False`` and a :class:`SelectionWarning` is emitted.
    """
    if pf.stage != PREDICTED:
        raise ValueError("select expects a predicted cloud")
    level = cfg.gamma_threshold if threshold is None else float(threshold)
    score = mean_likelihood(pf, spec, observation)
    if score > level:
        return pf, Selection(0, True, score)
    best, best_score = pf, score
    for attempt in range(1, cfg.max_redraws + 1):
        cand = spawn(rng)
        s = mean_likelihood(cand, spec, observation)
        if s > level:
            return cand, Selection(attempt, True, s)
        if s > best_score:
            best, best_score = cand, s
    warnings.warn(
        f"selection failed after {cfg.max_redraws} redraws "
        f"(best mean likelihood {best_score:.3e} <= {level:.3e})",
        SelectionWarning, stacklevel=2,
    )
    return best, Selection(cfg.max_redraws, False, best_score)


def correct(pf: ParticleSet, spec: ModelSpec, observation: np.ndarray) -> ParticleSet:
    if pf.stage != PREDICTED:
        raise ValueError("correct expects a predicted cloud")
    w = pf.weights * spec.likelihood(observation, pf.positions)
    total = w.sum()
    if not total > 0.0 or not np.isfinite(total):
        raise FilterDivergence("total unnormalised weight is zero")
    return ParticleSet(pf.positions, w / total, CORRECTED)


def _resample_indices(weights: np.ndarray, n: int, scheme: str, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    if scheme == "systematic":
        u = (rng.random() + np.arange(n)) / n
    else:
        u = rng.random(n)
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, len(weights) - 1)


def resample(pf: ParticleSet, cfg: FilterConfig, rng: np.random.Generator) -> ParticleSet:
    if pf.stage != CORRECTED:
        raise ValueError("resample expects a corrected cloud")
    n = pf.size
    idx = _resample_indices(pf.weights, n, cfg.resampling_scheme, rng)
    return ParticleSet(pf.positions[idx], np.full(n, 1.0 / n), CORRECTED)


def _finish(pred: ParticleSet, spec, observation, cfg, rng, sel: Selection):
    post = correct(pred, spec, observation)
    estimate = empirical_mean(post)
    ess = effective_sample_size(post.weights)
    out = resample(post, cfg, rng)
    diag = StepDiagnostics(
        mean_predicted_likelihood=sel.mean_likelihood,
        redraw_count=sel.redraw_count,
        selection_accepted=sel.accepted,
        ess_before_resampling=ess,
        effective_sample_size=effective_sample_size(out.weights),
        estimate=estimate,
    )
    return out, diag


def filter_step(pf: ParticleSet, spec: ModelSpec, control: np.ndarray, observation: np.ndarray,
                cfg: FilterConfig, rng: np.random.Generator,
                threshold: float | None = None) -> tuple[ParticleSet, StepDiagnostics]:
    """Advance the filter by one observation.

    ``diagnostics.estimate`` is the weighted mean of the corrected cloud, taken
    before resampling.
    """
    pred = predict(pf, spec, control, rng)
    pred, sel = select(pred, spec, observation, cfg,
                       lambda r: predict(pf, spec, control, r), rng, threshold)
    return _finish(pred, spec, observation, cfg, rng, sel)


def filter_init(spec: ModelSpec, observation: np.ndarray, cfg: FilterConfig,
                rng: np.random.Generator,
                threshold: float | None = None) -> tuple[ParticleSet, StepDiagnostics]:
    """Draw the initial cloud from the prior and assimilate ``Y_0``."""
    n = cfg.particle_count

    def spawn(r):
        return ParticleSet.uniform(spec.initial_sample(n, r), PREDICTED)

    pred, sel = select(spawn(rng), spec, observation, cfg, spawn, rng, threshold)
    return _finish(pred, spec, observation, cfg, rng, sel)


def run_filter(spec: ModelSpec, observations: Sequence[np.ndarray], controls: Sequence[np.ndarray],
               cfg: FilterConfig, rng: np.random.Generator,
               thresholds: Sequence[float] | None = None) -> tuple[np.ndarray, list[StepDiagnostics]]:
    """Filter a fixed history; returns the ``(k+1, n_x)`` estimates and per-step diagnostics."""
    if len(observations) != len(controls) + 1:
        raise ValueError("need one more observation than controls")
    th = [None] * len(observations) if thresholds is None else list(thresholds)
    pf, diag = filter_init(spec, observations[0], cfg, rng, th[0])
    diags = [diag]
    for k, u in enumerate(controls, start=1):
        pf, diag = filter_step(pf, spec, u, observations[k], cfg, rng, th[k])
        diags.append(diag)
    return np.array([d.estimate for d in diags]), diags


def with_particles(cfg: FilterConfig, n: int) -> FilterConfig:
    return replace(cfg, particle_count=int(n))
