"""Controlled hidden Markov model contract.

Every procedure on :class:`ModelSpec` is vectorised over a leading particle
axis: states are ``(N, n_x)`` arrays and controls ``(n_u,)`` vectors. The
likelihood takes either one observation ``(n_y,)`` against all states, or an
``(N, n_y)`` block paired row-wise with the states. Randomness always comes
from an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class ControlSet:
    """Admissible controls: Euclidean ball of radius ``radius`` or all of R^n_u."""

    dim: int
    radius: float | None = None

    def project(self, control: Array) -> Array:
        u = np.asarray(control, dtype=float).reshape(self.dim)
        if self.radius is None:
            return u
        norm = float(np.linalg.norm(u))
        if norm <= self.radius:
            return u
        return u * (self.radius / norm)

    def contains(self, control: Array, tol: float = 1e-12) -> bool:
        if self.radius is None:
            return True
        return float(np.linalg.norm(control)) <= self.radius + tol


def squared_error_cost(states: Array, estimate: Array) -> Array:
    diff = np.atleast_2d(states) - np.asarray(estimate, dtype=float)
    return np.einsum("ij,ij->i", diff, diff)


def zero_control_cost(states: Array, control: Array) -> Array:
    return np.zeros(len(np.atleast_2d(states)))


@dataclass(frozen=True)
class ModelSpec:
    state_dim: int
    control_dim: int
    obs_dim: int
    transition_sample: Callable[[Array, Array, np.random.Generator], Array]
    transition_density: Callable[[Array, Array, Array], Array]
    likelihood: Callable[[Array, Array], Array]
    initial_sample: Callable[[int, np.random.Generator], Array]
    initial_density: Callable[[Array], Array]
    observation_sample: Callable[[Array, np.random.Generator], Array]
    control_set: ControlSet
    cost_control: Callable[[Array, Array], Array] = zero_control_cost
    cost_estimation: Callable[[Array, Array], Array] = squared_error_cost
    # Optional deterministic parts, used by norm sweeps and noise-free rollouts.
    transition_mean: Callable[[Array, Array], Array] | None = None
    observation_mean: Callable[[Array], Array] | None = None
    # Per-channel half-width of the observation-noise support (inf = unbounded).
    noise_support: Array | None = None
    name: str = "model"
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for attr in ("state_dim", "control_dim", "obs_dim"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be a positive integer")
        if self.control_set.dim != self.control_dim:
            raise ValueError("control_set dimension does not match control_dim")


@dataclass
class History:
    """Information vector ``(Y_0, U_0, ..., U_{k-1}, Y_k)``."""

    observations: list[Array] = field(default_factory=list)
    controls: list[Array] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.controls)

    def append(self, control: Array, observation: Array) -> None:
        if len(self.observations) != len(self.controls) + 1:
            raise ValueError("history must start with an observation")
        self.controls.append(np.asarray(control, dtype=float))
        self.observations.append(np.asarray(observation, dtype=float))

    def check(self) -> None:
        if len(self.observations) != len(self.controls) + 1:
            raise ValueError(
                f"history layout broken: {len(self.observations)} observations "
                f"for {len(self.controls)} controls"
            )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class QuadratureGrid:
    """Quadrature rule used to check density normalisations.

    ``state_nodes``/``state_weights`` integrate over the next state,
    ``obs_nodes``/``obs_weights`` over the observation. The probe arrays are
    the conditioning points at which each normalisation is checked. When the
    model exposes a deterministic mean, nodes are offsets from that mean.
    """

    probe_states: Array
    probe_controls: Array
    state_nodes: Array | None = None
    state_weights: Array | None = None
    obs_nodes: Array | None = None
    obs_weights: Array | None = None


def trapezoid_grid(lo: float, hi: float, n: int) -> tuple[Array, Array]:
    nodes = np.linspace(lo, hi, n)
    weights = np.full(n, (hi - lo) / (n - 1))
    weights[[0, -1]] *= 0.5
    return nodes[:, None], weights


def gauss_legendre_box(lo: Sequence[float], hi: Sequence[float], n: int) -> tuple[Array, Array]:
    """Tensor-product Gauss-Legendre rule on an axis-aligned box."""
    x, w = np.polynomial.legendre.leggauss(n)
    axes, wts = [], []
    for a, b in zip(lo, hi):
        axes.append(0.5 * (b - a) * x + 0.5 * (b + a))
        wts.append(0.5 * (b - a) * w)
    mesh = np.meshgrid(*axes, indexing="ij")
    wmesh = np.meshgrid(*wts, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    weights = np.prod(np.stack([m.ravel() for m in wmesh], axis=1), axis=1)
    return nodes, weights


@dataclass
class CheckResult:
    name: str
    defect: float
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list[CheckResult]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __str__(self) -> str:
        lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name}: defect={c.defect:.3e} {c.detail}"
                 for c in self.checks]
        return "\n".join(lines)


def validate_model(spec: ModelSpec, grid: QuadratureGrid, tol: float = 1e-6) -> ValidationReport:
    """Check that K and rho integrate to one at each probe point."""
    checks: list[CheckResult] = []
    probes = np.atleast_2d(np.asarray(grid.probe_states, dtype=float))
    controls = np.atleast_2d(np.asarray(grid.probe_controls, dtype=float))

    if grid.state_nodes is not None:
        nodes = np.atleast_2d(grid.state_nodes)
        for x in probes:
            for u in controls:
                mean = spec.transition_mean(x[None, :], u)[0] if spec.transition_mean else 0.0
                z = nodes + mean
                vals = spec.transition_density(z, np.broadcast_to(x, z.shape), u)
                checks.append(_normalisation_check(
                    f"kernel at x={_fmt(x)} u={_fmt(u)}", vals, grid.state_weights, z, tol))

    if grid.obs_nodes is not None:
        nodes = np.atleast_2d(grid.obs_nodes)
        for x in probes:
            centre = spec.observation_mean(x[None, :])[0] if spec.observation_mean else 0.0
            ys = nodes + centre
            vals = spec.likelihood(ys, np.broadcast_to(x, (len(ys), x.size)))
            checks.append(_normalisation_check(
                f"likelihood at x={_fmt(x)}", vals, grid.obs_weights, ys, tol))

    return ValidationReport(checks, tol)


def _normalisation_check(name, vals, weights, nodes, tol) -> CheckResult:
    vals = np.asarray(vals, dtype=float)
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.argmax(bad))
        return CheckResult(name, float("inf"), False, f"non-finite density at node {_fmt(nodes[i])}")
    if (vals < 0).any():
        i = int(np.argmax(vals < 0))
        return CheckResult(name, float("inf"), False, f"negative density at node {_fmt(nodes[i])}")
    defect = abs(float(vals @ weights) - 1.0)
    return CheckResult(name, defect, defect < tol)


def _fmt(v) -> str:
    return np.array2string(np.asarray(v), precision=4, separator=",")


def kernel_ks_statistic(spec: ModelSpec, state: Array, control: Array, lo: float, hi: float,
                        n_samples: int, rng: np.random.Generator, n_grid: int = 20001) -> float:
    """Kolmogorov-Smirnov distance between sampled and tabulated 1-D kernels."""
    if spec.state_dim != 1:
        raise ValueError("KS comparison is defined for 1-D models only")
    x = np.full((n_samples, 1), float(np.ravel(state)[0]))
    samples = np.sort(spec.transition_sample(x, np.asarray(control, float), rng)[:, 0])
    z = np.linspace(lo, hi, n_grid)
    dens = spec.transition_density(z[:, None], np.full((n_grid, 1), x[0, 0]), np.asarray(control, float))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(z))])
    model_cdf = np.interp(samples, z, cdf)
    ecdf_hi = np.arange(1, n_samples + 1) / n_samples
    ecdf_lo = np.arange(0, n_samples) / n_samples
    return float(max(np.max(ecdf_hi - model_cdf), np.max(model_cdf - ecdf_lo)))


# ---------------------------------------------------------------------------
# Reference models
# ---------------------------------------------------------------------------


def _gauss_pdf(x: Array, var: float) -> Array:
    return np.exp(-0.5 * x * x / var) / np.sqrt(2.0 * np.pi * var)


def linear_gaussian_1d(a: float = 0.9, b: float = 1.0, q: float = 0.5, c: float = 1.0,
                       r: float = 1.0, m0: float = 0.0, p0: float = 4.0,
                       u_max: float | None = None, goal: float = 0.0,
                       control_weight: float = 0.0) -> ModelSpec:
    """Scalar model ``x' = a x + b u + N(0, q)``, ``y = c x + N(0, r)``."""
    if q < 0 or r <= 0 or p0 <= 0:
        raise ValueError("variances must be positive (q may be zero)")

    def transition_mean(states, control):
        return a * np.atleast_2d(states) + b * float(np.ravel(control)[0])

    def transition_sample(states, control, rng):
        mean = transition_mean(states, control)
        if q == 0.0:
            return mean
        return mean + np.sqrt(q) * rng.standard_normal(mean.shape)

    def transition_density(next_states, states, control):
        if q == 0.0:
            raise ValueError("zero process noise has no transition density")
        d = np.atleast_2d(next_states)[:, 0] - transition_mean(states, control)[:, 0]
        return _gauss_pdf(d, q)

    def likelihood(observation, states):
        d = np.atleast_2d(observation)[:, 0] - c * np.atleast_2d(states)[:, 0]
        return _gauss_pdf(d, r)

    def observation_sample(state, rng):
        x = float(np.ravel(state)[0])
        return np.array([c * x + np.sqrt(r) * rng.standard_normal()])

    def initial_sample(n, rng):
        return m0 + np.sqrt(p0) * rng.standard_normal((n, 1))

    def initial_density(states):
        return _gauss_pdf(np.atleast_2d(states)[:, 0] - m0, p0)

    def cost_control(states, control):
        s = np.atleast_2d(states)[:, 0]
        u = float(np.ravel(control)[0])
        return (s - goal) ** 2 + control_weight * u * u

    return ModelSpec(
        state_dim=1, control_dim=1, obs_dim=1,
        transition_sample=transition_sample,
        transition_density=transition_density,
        likelihood=likelihood,
        initial_sample=initial_sample,
        initial_density=initial_density,
        observation_sample=observation_sample,
        control_set=ControlSet(1, u_max),
        cost_control=cost_control,
        transition_mean=transition_mean,
        observation_mean=lambda states: c * np.atleast_2d(states),
        noise_support=np.array([np.inf]),
        name="linear_gaussian_1d",
        params=dict(a=a, b=b, q=q, c=c, r=r, m0=m0, p0=p0, u_max=u_max),
    )


def simulate(spec: ModelSpec, controls: Sequence[Array], rng: np.random.Generator,
             x0: Array | None = None) -> tuple[Array, Array]:
    """Draw a truth trajectory and its observations for an open-loop control sequence.

    Returns ``(states, observations)`` with ``len(controls) + 1`` rows each.
    """
    x = spec.initial_sample(1, rng)[0] if x0 is None else np.asarray(x0, dtype=float)
    states = [x]
    obs = [spec.observation_sample(x, rng)]
    for u in controls:
        u = spec.control_set.project(u)
        x = spec.transition_sample(x[None, :], u, rng)[0]
        states.append(x)
        obs.append(spec.observation_sample(x, rng))
    return np.array(states), np.array(obs)
