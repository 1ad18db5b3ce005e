"""Terrain-aided navigation model.

State ``(x1, x2, x3, v1, v2, v3)``: horizontal position, altitude and
velocity. Control is a 3-D acceleration saturated on the ``u_max`` ball.
Observation is the three velocities plus height above terrain,
``x3 - h_M(x1, x2)``, each corrupted by truncated Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy import special, stats

from .model import ControlSet, ModelSpec
from .terrain import TerrainMap

if TYPE_CHECKING:
    from .bounds import NormEstimates


def truncated_normal_pdf(r: np.ndarray, sigma: float, radius: float) -> np.ndarray:
    """Density of N(0, sigma^2) truncated to ``|r| <= radius * sigma``."""
    z = np.asarray(r, dtype=float) / sigma
    base = np.exp(-0.5 * z * z) / (np.sqrt(2 * np.pi) * sigma)
    if np.isinf(radius):
        return base
    mass = special.erf(radius / np.sqrt(2.0))
    return np.where(np.abs(z) <= radius, base / mass, 0.0)


def truncated_normal_sample(size, sigma: float, radius: float, rng: np.random.Generator) -> np.ndarray:
    if np.isinf(radius):
        return sigma * rng.standard_normal(size)
    return sigma * stats.truncnorm.rvs(-radius, radius, size=size, random_state=rng)


@dataclass(frozen=True)
class TanParams:
    dt: float = 1.0
    u_max: float = 2.0
    Q: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 0.25, 0.01, 0.01, 0.01]))
    noise_sigma: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.1, 0.1, 2.0]))
    # truncation half-width in units of each channel's sigma
    noise_support_radius: float = 3.0
    half_dt2_coupling: bool = True

    def __post_init__(self) -> None:
        Q = np.asarray(self.Q, dtype=float)
        sig = np.asarray(self.noise_sigma, dtype=float).reshape(-1)
        if self.dt <= 0 or self.u_max <= 0:
            raise ValueError("dt and u_max must be positive")
        if Q.shape != (6, 6) or not np.allclose(Q, Q.T):
            raise ValueError("Q must be a symmetric 6x6 matrix")
        if np.linalg.eigvalsh(Q).min() < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if sig.shape != (4,) or (sig <= 0).any():
            raise ValueError("noise_sigma needs four positive entries")
        if not self.noise_support_radius > 0:
            raise ValueError("noise_support_radius must be positive")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "noise_sigma", sig)

    @property
    def A(self) -> np.ndarray:
        A = np.eye(6)
        A[:3, 3:] = self.dt * np.eye(3)
        return A

    @property
    def B(self) -> np.ndarray:
        B = np.zeros((6, 3))
        if self.half_dt2_coupling:
            B[:3] = 0.5 * self.dt ** 2 * np.eye(3)
        B[3:] = self.dt * np.eye(3)
        return B


@dataclass(frozen=True)
class TanCost:
    """Stage cost ``w_g ||pos - goal||^2 + w_v ||v||^2 + w_u ||u||^2``."""

    goal: np.ndarray = field(default_factory=lambda: np.zeros(3))
    goal_weight: float = 0.0
    velocity_weight: float = 0.0
    control_weight: float = 0.0


def build_tan_model(terrain: TerrainMap, params: TanParams, initial_mean, initial_cov,
                    cost: TanCost | None = None) -> ModelSpec:
    cost = cost or TanCost()
    A, B, Q = params.A, params.B, params.Q
    sig, radius = params.noise_sigma, params.noise_support_radius
    m0 = np.asarray(initial_mean, dtype=float).reshape(6)
    P0 = np.asarray(initial_cov, dtype=float).reshape(6, 6)
    L0 = np.linalg.cholesky(P0)
    prior = stats.multivariate_normal(m0, P0)
    q_eig = np.linalg.eigvalsh(Q)
    q_chol = np.linalg.cholesky(Q) if q_eig.min() > 0 else None
    # sampling factor valid for singular Q as well
    w, V = np.linalg.eigh(Q)
    q_root = V * np.sqrt(np.clip(w, 0.0, None))
    control_set = ControlSet(3, params.u_max)
    goal = np.asarray(cost.goal, dtype=float).reshape(3)

    def transition_mean(states, control):
        u = control_set.project(control)
        return np.atleast_2d(states) @ A.T + B @ u

    def transition_sample(states, control, rng):
        mean = transition_mean(states, control)
        return mean + rng.standard_normal(mean.shape) @ q_root.T

    def transition_density(next_states, states, control):
        if q_chol is None:
            raise ValueError("singular Q: the transition kernel has no density")
        d = np.atleast_2d(next_states) - transition_mean(states, control)
        z = np.linalg.solve(q_chol, d.T)
        log_norm = 3.0 * np.log(2 * np.pi) + np.log(np.diag(q_chol)).sum()
        return np.exp(-0.5 * np.sum(z * z, axis=0) - log_norm)

    def observation_mean(states):
        s = np.atleast_2d(states)
        height = s[:, 2] - terrain.height(s[:, :2])
        return np.column_stack([s[:, 3:6], height])

    def likelihood(observation, states):
        resid = np.atleast_2d(observation) - observation_mean(states)
        out = np.ones(resid.shape[0])
        for c in range(4):
            out = out * truncated_normal_pdf(resid[:, c], sig[c], radius)
        return out

    def observation_sample(state, rng):
        mean = observation_mean(np.asarray(state)[None, :])[0]
        return mean + np.array([truncated_normal_sample(None, s, radius, rng) for s in sig])

    def initial_sample(n, rng):
        return m0 + rng.standard_normal((n, 6)) @ L0.T

    def cost_control(states, control):
        s = np.atleast_2d(states)
        u = control_set.project(control)
        return (cost.goal_weight * np.sum((s[:, :3] - goal) ** 2, axis=1)
                + cost.velocity_weight * np.sum(s[:, 3:] ** 2, axis=1)
                + cost.control_weight * float(u @ u))

    return ModelSpec(
        state_dim=6, control_dim=3, obs_dim=4,
        transition_sample=transition_sample,
        transition_density=transition_density,
        likelihood=likelihood,
        initial_sample=initial_sample,
        initial_density=lambda s: prior.pdf(np.atleast_2d(s)).reshape(-1),
        observation_sample=observation_sample,
        control_set=control_set,
        cost_control=cost_control,
        transition_mean=transition_mean,
        observation_mean=observation_mean,
        noise_support=radius * sig,
        name="tan",
        params=dict(tan=params, terrain=terrain, cost=cost, initial_mean=m0, initial_cov=P0),
    )


def tan_slice_model(terrain: TerrainMap, track_y: float, altitude: float, speed: float,
                    dt: float = 1.0, q: float = 4.0, sigma_h: float = 2.0,
                    noise_support_radius: float = 3.0, m0: float = 0.0, p0: float = 100.0,
                    u_max: float | None = None) -> ModelSpec:
    """One-dimensional cut of the TAN model along the line ``x2 = track_y``.

    Altitude and velocity are known exactly, so the only hidden coordinate is
    the along-track position ``p``: ``p' = p + dt (speed + u) + N(0, q)`` and
    ``y = altitude - h_M(p, track_y) + eta``.
    """
    radius = noise_support_radius

    def ground(p):
        pts = np.column_stack([p, np.full(len(p), track_y)])
        return terrain.height(pts)

    def transition_mean(states, control):
        return np.atleast_2d(states) + dt * (speed + float(np.ravel(control)[0]))

    def transition_sample(states, control, rng):
        mean = transition_mean(states, control)
        return mean + np.sqrt(q) * rng.standard_normal(mean.shape)

    def transition_density(next_states, states, control):
        d = np.atleast_2d(next_states)[:, 0] - transition_mean(states, control)[:, 0]
        return np.exp(-0.5 * d * d / q) / np.sqrt(2 * np.pi * q)

    def observation_mean(states):
        s = np.atleast_2d(states)
        return (altitude - ground(s[:, 0]))[:, None]

    def likelihood(observation, states):
        resid = np.atleast_2d(observation)[:, 0] - observation_mean(states)[:, 0]
        return truncated_normal_pdf(resid, sigma_h, radius)

    def observation_sample(state, rng):
        return observation_mean(np.asarray(state)[None, :])[0] + truncated_normal_sample(1, sigma_h, radius, rng)

    def initial_sample(n, rng):
        return m0 + np.sqrt(p0) * rng.standard_normal((n, 1))

    def initial_density(states):
        d = np.atleast_2d(states)[:, 0] - m0
        return np.exp(-0.5 * d * d / p0) / np.sqrt(2 * np.pi * p0)

    return ModelSpec(
        state_dim=1, control_dim=1, obs_dim=1,
        transition_sample=transition_sample,
        transition_density=transition_density,
        likelihood=likelihood,
        initial_sample=initial_sample,
        initial_density=initial_density,
        observation_sample=observation_sample,
        control_set=ControlSet(1, u_max),
        transition_mean=transition_mean,
        observation_mean=observation_mean,
        noise_support=np.array([radius * sigma_h]),
        name="tan_slice",
        params=dict(terrain=terrain, track_y=track_y, altitude=altitude, speed=speed, dt=dt, q=q,
                    sigma_h=sigma_h, noise_support_radius=radius, m0=m0, p0=p0),
    )


def kernel_peak(Q: np.ndarray) -> float:
    """Mode of the Gaussian transition density, ``1 / ((2 pi)^{n/2} |Q|^{1/2})``."""
    n = Q.shape[0]
    return float(1.0 / ((2 * np.pi) ** (n / 2) * np.sqrt(np.linalg.det(Q))))


# ---------------------------------------------------------------------------
# Boundedness checks
# ---------------------------------------------------------------------------


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    detail: str
    value: float | None = None


@dataclass
class AssumptionReport:
    checks: list[AssumptionCheck]
    norms: "NormEstimates | None" = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        return [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in self.checks]


def default_sweep(spec: ModelSpec, n_pos: int = 9, n_offsets: int = 5):
    """Sweep over the terrain footprint, a few altitudes/velocities and the noise support."""
    from .bounds import SweepGrid

    if spec.name == "tan":
        terr: TerrainMap = spec.params["terrain"]
        x0, x1, y0, y1 = terr.extent
        m0 = spec.params["initial_mean"]
        axes = [np.linspace(x0, x1, n_pos), np.linspace(y0, y1, max(2, n_pos // 2)),
                m0[2] + np.array([-10.0, 0.0, 10.0]),
                np.array([-2.0, 0.0, 2.0]), np.array([-1.0, 0.0, 1.0]), np.array([-0.5, 0.0, 0.5])]
        mesh = np.meshgrid(*axes, indexing="ij")
        states = np.stack([m.ravel() for m in mesh], axis=1)
    elif spec.name == "tan_slice":
        x0, x1, _, _ = spec.params["terrain"].extent
        states = np.linspace(x0, x1, 40 * n_pos)[:, None]
    else:
        lo, hi = spec.params.get("sweep_range", (-50.0, 50.0))
        states = np.linspace(lo, hi, 20 * n_pos)[:, None]
    support = np.asarray(spec.noise_support, dtype=float)
    finite = np.where(np.isfinite(support), support, 5.0 * _sigmas(spec))
    per_axis = [np.linspace(-r, r, n_offsets) for r in finite]
    mesh = np.meshgrid(*per_axis, indexing="ij")
    offsets = np.stack([m.ravel() for m in mesh], axis=1)
    return SweepGrid(states=states, obs_offsets=offsets,
                     kernel_offsets=np.zeros((1, spec.state_dim)))


def _sigmas(spec: ModelSpec) -> np.ndarray:
    if spec.name == "tan":
        return spec.params["tan"].noise_sigma
    if "sigma_h" in spec.params:
        return np.array([spec.params["sigma_h"]])
    return np.array([np.sqrt(spec.params.get("r", 1.0))])


def verify_assumptions(spec: ModelSpec, sweep=None, margin: float = 1.0) -> AssumptionReport:
    """Check boundedness of K and rho and the vanishing of x_i^2 rho off the noise support.

    (a) K and rho finite on the sweep; (b) uniform sup-norms finite, with their
    values; (c) ``rho == 0`` exactly when any observation channel sits
    ``support + margin`` away from its noise-free value.
    """
    from .bounds import AssumptionViolation, UNIFORM, estimate_norms

    sweep = sweep or default_sweep(spec)
    checks: list[AssumptionCheck] = []
    states = np.atleast_2d(sweep.states)

    # (a) finiteness of K and rho
    try:
        norms = estimate_norms(spec, sweep, UNIFORM)
        checks.append(AssumptionCheck("finite_densities", True,
                                      f"K and rho finite at {len(states)} states"))
    except (AssumptionViolation, ValueError, np.linalg.LinAlgError) as exc:
        checks.append(AssumptionCheck("finite_densities", False, str(exc)))
        return AssumptionReport(checks)

    # (b) finite sup-norms
    vals = {"||K||_inf": norms.norm_K, "||rho||_inf": norms.norm_rho}
    for j, v in enumerate(norms.norm_rho_phi2):
        vals[f"||rho phi_{j + 1}^2||_inf"] = float(v)
    for name, v in vals.items():
        checks.append(AssumptionCheck(name, bool(np.isfinite(v)), f"{v:.6g}", float(v)))

    # (c) x_i^2 rho vanishes outside the support
    support = np.asarray(spec.noise_support, dtype=float)
    if not np.isfinite(support).all():
        probe = 10.0 * _sigmas(spec)
        centre = spec.observation_mean(states)
        y = centre.copy()
        y[:, -1] += probe[-1]
        rho = spec.likelihood(y, states)
        i = int(np.argmax(rho))
        checks.append(AssumptionCheck(
            "vanishing_outside_support", False,
            f"noise support unbounded; rho = {rho[i]:.3e} > 0 at state {states[i]} "
            f"with residual {probe[-1]:.3g}", float(rho[i])))
        return AssumptionReport(checks, norms)
    centre = spec.observation_mean(states)
    worst = 0.0
    where = None
    for c in range(spec.obs_dim):
        for sign in (-1.0, 1.0):
            y = centre.copy()
            y[:, c] += sign * (support[c] + margin)
            vals_c = np.max(states ** 2, axis=1) * spec.likelihood(y, states)
            i = int(np.argmax(vals_c))
            if vals_c[i] > worst:
                worst, where = float(vals_c[i]), (c, sign, states[i])
    if worst == 0.0:
        checks.append(AssumptionCheck("vanishing_outside_support", True,
                                      f"x_i^2 rho == 0 at support + {margin}", 0.0))
    else:
        c, sign, x = where
        checks.append(AssumptionCheck("vanishing_outside_support", False,
                                      f"x_i^2 rho = {worst:.3e} on channel {c} ({sign:+.0f}) at {x}",
                                      worst))
    return AssumptionReport(checks, norms)
