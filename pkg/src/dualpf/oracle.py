"""Deterministic grid (point-mass) filter used as ground truth.

For models with at most two hidden dimensions the filtering recursion is
evaluated by quadrature on a regular mesh. The grid posterior provides the
conditional mean, the optimal conditional MSE and the likelihood integrals
the bound constants need.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import ModelSpec

MAX_ORACLE_DIM = 2
_CHUNK = 2_000_000  # kernel entries evaluated per block


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridDistribution:
    axes: tuple[np.ndarray, ...]
    masses: np.ndarray

    def __post_init__(self) -> None:
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        if not 1 <= len(axes) <= MAX_ORACLE_DIM:
            raise ValueError(f"grid dimension must be 1..{MAX_ORACLE_DIM}")
        for a in axes:
            if a.ndim != 1 or len(a) < 2 or not np.allclose(np.diff(a), a[1] - a[0], rtol=1e-9, atol=0):
                raise ValueError("grid axes must be regular and increasing")
        m = np.asarray(self.masses, dtype=float).reshape(-1)
        if m.size != int(np.prod([len(a) for a in axes])):
            raise ValueError("masses do not match grid size")
        if (m < 0).any():
            raise ValueError("masses must be nonnegative")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "masses", m)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a[1] - a[0] for a in self.axes])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def expect(self, values: np.ndarray) -> float:
        return float(self.masses @ values)

    @classmethod
    def from_density(cls, axes: Sequence[np.ndarray], density: Callable[[np.ndarray], np.ndarray]) -> "GridDistribution":
        empty = cls(tuple(axes), np.ones(int(np.prod([len(a) for a in axes]))))
        m = np.asarray(density(empty.nodes), dtype=float)
        return cls(empty.axes, _normalise(m))

    @classmethod
    def dirac(cls, axes: Sequence[np.ndarray], point: Sequence[float]) -> "GridDistribution":
        empty = cls(tuple(axes), np.ones(int(np.prod([len(a) for a in axes]))))
        d = np.linalg.norm((empty.nodes - np.asarray(point, float)) / empty.spacing, axis=1)
        m = np.zeros(len(d))
        m[int(np.argmin(d))] = 1.0
        return cls(empty.axes, m)


def regular_axes(lo: Sequence[float], hi: Sequence[float], counts: Sequence[int]) -> tuple[np.ndarray, ...]:
    return tuple(np.linspace(a, b, n) for a, b, n in zip(lo, hi, counts))


def _normalise(m: np.ndarray) -> np.ndarray:
    total = m.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise OracleError("total mass underflow; widen or refine the grid")
    return m / total


def _kernel_apply(spec: ModelSpec, src_nodes, src_mass, dst_nodes, control) -> np.ndarray:
    """Predicted density at ``dst_nodes``: sum_x K(z, x, u) m(x)."""
    keep = src_mass > 0
    src_nodes, src_mass = src_nodes[keep], src_mass[keep]
    n_src, d = src_nodes.shape
    out = np.zeros(len(dst_nodes))
    rows = max(1, _CHUNK // max(n_src, 1))
    for start in range(0, len(dst_nodes), rows):
        z = dst_nodes[start:start + rows]
        zz = np.repeat(z, n_src, axis=0)
        xx = np.tile(src_nodes, (len(z), 1))
        k = np.asarray(spec.transition_density(zz, xx, control), dtype=float).reshape(len(z), n_src)
        out[start:start + rows] = k @ src_mass
    return out


def grid_predict(dist: GridDistribution, spec: ModelSpec, control: np.ndarray,
                 auto_expand: bool = False, n_std: float = 6.0) -> GridDistribution:
    """Push the grid law through the transition kernel.

    With ``auto_expand`` the output mesh keeps the node count but is moved and
    rescaled to cover ``n_std`` predicted standard deviations around the
    predicted mean.
    """
    if spec.state_dim > MAX_ORACLE_DIM or spec.state_dim != dist.dim:
        raise OracleError("grid oracle supports state_dim <= 2 matching the grid")
    u = spec.control_set.project(control)
    src = dist.nodes
    axes = dist.axes
    if auto_expand:
        wide = tuple(np.linspace(a[0] - (a[-1] - a[0]), a[-1] + (a[-1] - a[0]), len(a)) for a in axes)
        probe = GridDistribution(wide, np.ones(int(np.prod([len(a) for a in wide]))))
        m = _normalise(_kernel_apply(spec, src, dist.masses, probe.nodes, u))
        mean = m @ probe.nodes
        std = np.sqrt(np.maximum(m @ (probe.nodes - mean) ** 2, 0.0))
        std = np.maximum(std, probe.spacing)
        axes = tuple(np.linspace(mu - n_std * s, mu + n_std * s, len(a))
                     for mu, s, a in zip(mean, std, axes))
    out = GridDistribution(axes, np.ones(int(np.prod([len(a) for a in axes]))))
    dens = _kernel_apply(spec, src, dist.masses, out.nodes, u)
    return GridDistribution(axes, _normalise(dens * out.cell_volume))


def grid_correct(dist: GridDistribution, spec: ModelSpec, observation: np.ndarray) -> GridDistribution:
    rho = np.asarray(spec.likelihood(observation, dist.nodes), dtype=float)
    post = dist.masses * rho
    if not post.sum() > 0.0:
        raise OracleError("posterior vanishes on the grid: observation outside model support")
    return GridDistribution(dist.axes, post / post.sum())


def conditional_mse(dist: GridDistribution) -> tuple[np.ndarray, float]:
    """Conditional mean and its MSE (trace of the posterior covariance)."""
    nodes = dist.nodes
    mean = dist.masses @ nodes
    e_star = float(dist.masses @ np.sum((nodes - mean) ** 2, axis=1))
    return mean, e_star


@dataclass
class OracleStep:
    k: int
    predicted: GridDistribution
    posterior: GridDistribution
    mean: np.ndarray
    e_star: float
    mean_pred_likelihood: float  # <mu_{k|k-1}, rho(y_k, .)>
    mean_post_likelihood: float  # <mu_k, rho(y_k, .)>
    second_moments: np.ndarray   # <mu_k, phi_j^2> per coordinate


def run_grid_filter(spec: ModelSpec, axes: Sequence[np.ndarray], observations: Sequence[np.ndarray],
                    controls: Sequence[np.ndarray], auto_expand: bool = False) -> list[OracleStep]:
    """Exact-up-to-quadrature filter over a fixed history."""
    if len(observations) != len(controls) + 1:
        raise ValueError("need one more observation than controls")
    prior = GridDistribution.from_density(axes, spec.initial_density)
    steps: list[OracleStep] = []
    pred = prior
    for k, y in enumerate(observations):
        if k > 0:
            pred = grid_predict(steps[-1].posterior, spec, controls[k - 1], auto_expand=auto_expand)
        rho = np.asarray(spec.likelihood(y, pred.nodes), dtype=float)
        post = grid_correct(pred, spec, y)
        mean, e_star = conditional_mse(post)
        steps.append(OracleStep(
            k=k, predicted=pred, posterior=post, mean=mean, e_star=e_star,
            mean_pred_likelihood=float(pred.masses @ rho),
            mean_post_likelihood=float(post.masses @ rho),
            second_moments=post.masses @ post.nodes ** 2,
        ))
    return steps


def kalman_1d(a: float, b: float, q: float, c: float, r: float, m0: float, p0: float,
              observations: Sequence[np.ndarray], controls: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form scalar Kalman filter; returns posterior means and variances."""
    means, variances = [], []
    m, p = m0, p0
    for k, y in enumerate(observations):
        if k > 0:
            m = a * m + b * float(np.ravel(controls[k - 1])[0])
            p = a * a * p + q
        s = c * c * p + r
        g = p * c / s
        m = m + g * (float(np.ravel(y)[0]) - c * m)
        p = (1.0 - g * c) * p
        means.append(m)
        variances.append(p)
    return np.array(means), np.array(variances)


@dataclass
class TotalMseResult:
    mean: np.ndarray
    se: np.ndarray
    trials_used: int
    trials_failed: int
    squared_errors: np.ndarray  # (trials_used, horizon+1)


def total_mse_monte_carlo(spec: ModelSpec, policy: Callable[[int, list], np.ndarray],
                          estimator: Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray],
                          trials: int, horizon: int, rng: np.random.Generator) -> TotalMseResult:
    """Outer Monte Carlo over trajectories of E||X_k - Xhat_k||^2.

    ``policy(k, observations_so_far)`` returns the control applied after
    ``Y_k``; ``estimator(observations, controls, rng)`` returns the
    ``(horizon+1, n_x)`` estimates for one trajectory. Trials whose estimator
    raises are excluded and counted.
    """
    if trials < 30:
        raise ValueError("need at least 30 trials for standard-error reporting")
    errors, failed = [], 0
    for _ in range(trials):
        x = spec.initial_sample(1, rng)[0]
        states, obs, ctrls = [x], [spec.observation_sample(x, rng)], []
        for k in range(horizon):
            u = spec.control_set.project(policy(k, obs))
            x = spec.transition_sample(x[None, :], u, rng)[0]
            ctrls.append(u)
            states.append(x)
            obs.append(spec.observation_sample(x, rng))
        try:
            est = np.asarray(estimator(np.array(obs), np.array(ctrls), rng), dtype=float)
        except (RuntimeError, FloatingPointError, ValueError):
            failed += 1
            continue
        errors.append(np.sum((np.array(states) - est) ** 2, axis=1))
    if not errors:
        raise OracleError("every trial failed")
    err = np.array(errors)
    se = err.std(axis=0, ddof=1) / np.sqrt(len(err)) if len(err) > 1 else np.zeros(err.shape[1])
    return TotalMseResult(err.mean(axis=0), se, len(err), failed, err)
