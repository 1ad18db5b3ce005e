"""Constants and inequalities of the particle-filter MSE bounds.

Two flavours of every constant exist. ``conditional`` constants depend on the
realised information vector through sup-norms at the current observation and
through the predicted mean likelihood; ``uniform`` constants replace those by
suprema over all observations and by ``gamma / 2`` and so bound the former.

The recursions multiply quickly past the float range, so constants are held
as ``mpmath.mpf`` values (53-bit mantissa, unbounded exponent) in numpy object
arrays. Use :func:`as_float` for plotting or CSV output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import mpmath
import numpy as np

from .model import ModelSpec

CONDITIONAL = "conditional"
UNIFORM = "uniform"
_MODES = (CONDITIONAL, UNIFORM)

mpf = mpmath.mpf


class AssumptionViolation(ValueError):
    """Inputs break the hypotheses under which the bound is stated."""


def _mp_array(values) -> np.ndarray:
    return np.array([mpf(float(v)) if not isinstance(v, mpmath.mpf) else v for v in np.ravel(values)],
                    dtype=object)


def as_float(values) -> np.ndarray:
    return np.array([float(v) for v in np.ravel(values)], dtype=float)


# ---------------------------------------------------------------------------
# Sup-norm sweeps
# ---------------------------------------------------------------------------


@dataclass
class NormEstimates:
    norm_K: float
    norm_rho: float
    norm_rho_phi2: np.ndarray
    norm_rho_phi: np.ndarray
    mode: str

    def __post_init__(self) -> None:
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}")
        self.norm_rho_phi2 = np.asarray(self.norm_rho_phi2, dtype=float).reshape(-1)
        self.norm_rho_phi = np.asarray(self.norm_rho_phi, dtype=float).reshape(-1)
        vals = np.concatenate([[self.norm_K, self.norm_rho], self.norm_rho_phi2, self.norm_rho_phi])
        if not np.isfinite(vals).all() or (vals < 0).any():
            raise AssumptionViolation("sup-norms must be finite and nonnegative")

    @property
    def dim(self) -> int:
        return self.norm_rho_phi2.size


@dataclass
class SweepGrid:
    """Points over which suprema are taken.

    ``obs_offsets`` are added to the model's noise-free observation at each
    swept state (include a zero row to hit the noise mode); ``observations``
    are absolute observation values paired with every swept state.
    ``kernel_offsets`` are added to the noise-free next state.
    """

    states: np.ndarray
    controls: np.ndarray | None = None
    observations: np.ndarray | None = None
    obs_offsets: np.ndarray | None = None
    kernel_offsets: np.ndarray | None = None


def _check_finite(vals, what, where):
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.argmax(bad))
        raise AssumptionViolation(f"non-finite {what} at {np.asarray(where)[i]}")


def estimate_norms(spec: ModelSpec, sweep: SweepGrid, mode: str = CONDITIONAL,
                   observation: np.ndarray | None = None,
                   control: np.ndarray | None = None) -> NormEstimates:
    """Grid maxima of K, rho, phi_j^2 rho and |phi_j| rho.

    ``conditional`` fixes ``observation`` (y_k) and ``control`` (u_{k-1});
    ``uniform`` sweeps the observations and controls held by ``sweep``.
    """
    if mode not in _MODES:
        raise ValueError(f"mode must be one of {_MODES}")
    X = np.atleast_2d(np.asarray(sweep.states, dtype=float))
    n = X.shape[1]
    if mode == CONDITIONAL:
        if observation is None:
            raise ValueError("conditional norms need the observation y_k")
        controls = [np.zeros(spec.control_dim) if control is None else np.asarray(control, float)]
        rho_blocks = [np.asarray(spec.likelihood(observation, X), dtype=float)]
    else:
        controls = (list(np.atleast_2d(sweep.controls)) if sweep.controls is not None
                    else [np.zeros(spec.control_dim)])
        rho_blocks = []
        if sweep.obs_offsets is not None:
            if spec.observation_mean is None:
                raise ValueError("obs_offsets need a model with observation_mean")
            centre = spec.observation_mean(X)
            for off in np.atleast_2d(sweep.obs_offsets):
                rho_blocks.append(np.asarray(spec.likelihood(centre + off, X), dtype=float))
        if sweep.observations is not None:
            for y in np.atleast_2d(sweep.observations):
                rho_blocks.append(np.asarray(spec.likelihood(y, X), dtype=float))
        if not rho_blocks:
            raise ValueError("uniform norms need observations or obs_offsets in the sweep")

    norm_rho = 0.0
    phi2 = np.zeros(n)
    phi1 = np.zeros(n)
    for rho in rho_blocks:
        _check_finite(rho, "likelihood", X)
        norm_rho = max(norm_rho, float(rho.max()))
        phi2 = np.maximum(phi2, np.max(X ** 2 * rho[:, None], axis=0))
        phi1 = np.maximum(phi1, np.max(np.abs(X) * rho[:, None], axis=0))

    norm_K = 0.0
    for u in controls:
        if spec.transition_mean is not None:
            offsets = (np.zeros((1, n)) if sweep.kernel_offsets is None
                       else np.atleast_2d(sweep.kernel_offsets))
            mean = spec.transition_mean(X, u)
            for off in offsets:
                k = np.asarray(spec.transition_density(mean + off, X, u), dtype=float)
                _check_finite(k, "transition density", X)
                norm_K = max(norm_K, float(k.max()))
        else:
            for z in X:
                k = np.asarray(spec.transition_density(np.broadcast_to(z, X.shape), X, u), dtype=float)
                _check_finite(k, "transition density", X)
                norm_K = max(norm_K, float(k.max()))
    return NormEstimates(norm_K, norm_rho, phi2, phi1, mode)


# ---------------------------------------------------------------------------
# Recursions
# ---------------------------------------------------------------------------


@dataclass
class BoundConstants:
    k: int
    C: np.ndarray
    M: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: float
    eps: float
    C_tilde: float
    rho_k2: float
    mean_pred_likelihood: float
    phi_norm_k2: np.ndarray
    mode: str
    n_threshold: int = 1
    notes: list[str] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return len(self.C)


def _check_eps(eps: float) -> None:
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")


def theta(eps: float) -> mpmath.mpf:
    """``1 + (4 - eps) / (1 - eps)``, the growth factor of M."""
    _check_eps(eps)
    return 1 + (4 - mpf(eps)) / (1 - mpf(eps))


def next_M(alpha, eps: float, M_prev):
    """``M_k = 2 + alpha (1 + ((4 - eps)/(1 - eps) + 1) M_{k-1})``."""
    return 2 + mpf(alpha) * (1 + theta(eps) * mpf(M_prev))


def next_sqrt_C(M, M_prev, C_prev, beta, eps: float, C_tilde: float, norm_K: float,
                likelihood_factor) -> mpmath.mpf:
    """Four-term recursion for ``C_k^{1/2}``.

    ``likelihood_factor`` is ``||rho||_{k,2} / |gamma/2 - <mu_{k|k-1}, rho>|`` in
    conditional mode and ``||rho||_inf / (gamma/2)`` in uniform mode.
    """
    _check_eps(eps)
    eps, K = mpf(eps), mpf(norm_K)
    c = 2 ** mpf(1.5) * mpmath.sqrt(mpf(C_tilde))
    sM, sMp, sCp = mpmath.sqrt(mpf(M)), mpmath.sqrt(mpf(M_prev)), mpmath.sqrt(mpf(C_prev))
    beta = mpf(beta)
    return (c * sM
            + c * beta / mpmath.sqrt(1 - eps) * sMp
            + K ** mpf(1.5) * mpf(likelihood_factor) * beta / (1 - eps) * sMp * sCp
            + K * beta * sCp)


def alpha_beta(norms: NormEstimates, gamma: float, mean_pred_likelihood: float | None):
    """Per-coordinate ``(alpha, beta)`` for the mode carried by ``norms``."""
    g2 = mpf(gamma) / 2
    if norms.mode == CONDITIONAL:
        denom = g2 * mpf(mean_pred_likelihood)
    else:
        denom = mpf(gamma) ** 2 / 2
    if denom == 0:
        raise AssumptionViolation("zero denominator gamma/2 * <mu_{k|k-1}, rho>")
    K2, rho = mpf(norms.norm_K) ** 2, mpf(norms.norm_rho)
    alpha = _mp_array([K2 * rho * (mpf(v) + g2) / denom for v in norms.norm_rho_phi2])
    beta = _mp_array([rho * (mpf(v) + g2) / denom for v in norms.norm_rho_phi])
    return alpha, beta


def initial_constants(dim: int, C_tilde: float = 1.0, mode: str = CONDITIONAL,
                      phi_norm_k2=None, eps: float = 0.1, gamma: float = 1.0) -> BoundConstants:
    """Time-0 constants: ``M_0 = 3`` and ``C_0 = 8 C_tilde`` in every coordinate."""
    if C_tilde <= 0:
        raise ValueError("C_tilde must be positive")
    if mode not in _MODES:
        raise ValueError(f"mode must be one of {_MODES}")
    phi = np.ones(dim) if phi_norm_k2 is None else np.asarray(phi_norm_k2, float)
    return BoundConstants(
        k=0, C=_mp_array([8 * mpf(C_tilde)] * dim), M=_mp_array([3] * dim),
        alpha=_mp_array([0] * dim), beta=_mp_array([0] * dim), gamma=gamma, eps=eps,
        C_tilde=C_tilde, rho_k2=float("nan"), mean_pred_likelihood=float("nan"),
        phi_norm_k2=phi, mode=mode, n_threshold=1,
    )


def _check_likelihood_inputs(mode, gamma, mean_pred_likelihood):
    if not gamma > 0:
        raise AssumptionViolation("gamma must be positive")
    if mode == CONDITIONAL:
        if mean_pred_likelihood is None or not mean_pred_likelihood > 0:
            raise AssumptionViolation("zero denominator: <mu_{k|k-1}, rho> = 0")
        if mean_pred_likelihood < gamma:
            raise AssumptionViolation(
                f"<mu_(k|k-1), rho> = {mean_pred_likelihood:.4g} is below gamma = {gamma:.4g}")


def threshold_N(prev_C, norms: NormEstimates, gamma: float, eps: float,
                mean_pred_likelihood: float | None = None, rho_k2: float | None = None,
                mode: str | None = None) -> int:
    """Smallest admissible particle count at time k.

    conditional: ``||rho||_{k,2}^2 ||K||^2 max_j C_{k-1,j} / (|gamma/2 - <mu_{k|k-1},rho>|^2 eps)``;
    uniform: ``||rho||_inf^2 ||K||_inf^2 max_j C'_{k-1,j} / ((gamma/2)^2 eps)``.
    """
    mode = mode or norms.mode
    _check_eps(eps)
    _check_likelihood_inputs(mode, gamma, mean_pred_likelihood)
    c_max = max(mpf(c) if isinstance(c, mpmath.mpf) else mpf(float(c)) for c in np.ravel(prev_C))
    K2 = mpf(norms.norm_K) ** 2
    if mode == CONDITIONAL:
        if rho_k2 is None:
            raise ValueError("conditional threshold needs ||rho||_{k,2}")
        gap = abs(mpf(gamma) / 2 - mpf(mean_pred_likelihood))
        num, den = mpf(rho_k2) ** 2 * K2 * c_max, gap ** 2 * mpf(eps)
    else:
        num, den = mpf(norms.norm_rho) ** 2 * K2 * c_max, (mpf(gamma) / 2) ** 2 * mpf(eps)
    if den == 0:
        raise AssumptionViolation("zero denominator in the particle-count threshold")
    return max(1, int(mpmath.ceil(num / den)))


def recurse_constants(prev: BoundConstants, norms: NormEstimates, gamma: float, eps: float,
                      C_tilde: float, mean_pred_likelihood: float | None = None,
                      rho_k2: float | None = None, phi_norm_k2=None) -> BoundConstants:
    """Constants at time ``prev.k + 1``.

    In uniform mode ``mean_pred_likelihood`` and ``rho_k2`` are not used:
    the recursion runs on ``||rho||_inf`` and ``gamma / 2``.
    """
    mode = norms.mode
    _check_eps(eps)
    _check_likelihood_inputs(mode, gamma, mean_pred_likelihood)
    if norms.dim != prev.dim:
        raise ValueError("norm estimates and previous constants differ in dimension")
    alpha, beta = alpha_beta(norms, gamma, mean_pred_likelihood)
    if mode == CONDITIONAL:
        if rho_k2 is None:
            raise ValueError("conditional recursion needs ||rho||_{k,2}")
        factor = mpf(rho_k2) / abs(mpf(gamma) / 2 - mpf(mean_pred_likelihood))
    else:
        factor = mpf(norms.norm_rho) / (mpf(gamma) / 2)
    M = _mp_array([next_M(a, eps, mp) for a, mp in zip(alpha, prev.M)])
    sqrtC = [next_sqrt_C(m, mp, cp, b, eps, C_tilde, norms.norm_K, factor)
             for m, mp, cp, b in zip(M, prev.M, prev.C, beta)]
    C = _mp_array([s * s for s in sqrtC])
    n_thr = threshold_N(prev.C, norms, gamma, eps, mean_pred_likelihood, rho_k2, mode)
    phi = prev.phi_norm_k2 if phi_norm_k2 is None else np.asarray(phi_norm_k2, float)
    return BoundConstants(
        k=prev.k + 1, C=C, M=M, alpha=alpha, beta=beta, gamma=gamma, eps=eps, C_tilde=C_tilde,
        rho_k2=float("nan") if rho_k2 is None else float(rho_k2),
        mean_pred_likelihood=float("nan") if mean_pred_likelihood is None else float(mean_pred_likelihood),
        phi_norm_k2=phi, mode=mode, n_threshold=n_thr,
    )


def phi_norms(second_moments: Sequence[np.ndarray]) -> np.ndarray:
    """``||phi_j||_{k,2} = max(1, <mu_0, phi_j^2>^{1/2}, ..., <mu_k, phi_j^2>^{1/2})`` for each k."""
    sm = np.sqrt(np.atleast_2d(np.asarray(second_moments, dtype=float)))
    return np.maximum(1.0, np.maximum.accumulate(sm, axis=0))


def constant_sequence(norms_seq: Sequence[NormEstimates], gammas: Sequence[float], eps: float,
                      C_tilde: float, mean_pred_likelihoods: Sequence[float] | None = None,
                      rho_k2s: Sequence[float] | None = None,
                      phi_norm_seq: Sequence[np.ndarray] | None = None) -> list[BoundConstants]:
    """Run the recursion for k = 0..len(norms_seq).

    ``norms_seq[i]``, ``gammas[i]`` etc. are the inputs at time ``i + 1``;
    ``phi_norm_seq`` (if given) has one more row, starting at k = 0.
    """
    if not norms_seq:
        raise ValueError("need at least one step")
    mode = norms_seq[0].mode
    dim = norms_seq[0].dim
    phi0 = None if phi_norm_seq is None else phi_norm_seq[0]
    out = [initial_constants(dim, C_tilde, mode, phi0, eps, gammas[0])]
    for i, norms in enumerate(norms_seq):
        out.append(recurse_constants(
            out[-1], norms, gammas[i], eps, C_tilde,
            None if mean_pred_likelihoods is None else mean_pred_likelihoods[i],
            None if rho_k2s is None else rho_k2s[i],
            None if phi_norm_seq is None else phi_norm_seq[i + 1],
        ))
    return out


# ---------------------------------------------------------------------------
# Sandwiches
# ---------------------------------------------------------------------------


def _filter_term(C, weights) -> mpmath.mpf:
    return mpmath.fsum(mpf(c) * mpf(float(w)) for c, w in zip(np.ravel(C), np.ravel(weights)))


def conditional_bound(e_star: float, consts: BoundConstants, N: int,
                      eps_bound: float) -> tuple[float, float]:
    """``e* <= e_N <= (1 + eps) e* + (1 + 1/eps) sum_j C_j ||phi_j||_{k,2}^2 / N``."""
    if N < 1:
        raise ValueError("N must be a positive integer")
    if N < consts.n_threshold:
        raise AssumptionViolation(
            f"N = {N} is below the particle threshold N_k = {consts.n_threshold}")
    if not eps_bound > 0:
        raise ValueError("eps_bound must be positive")
    eps = mpf(eps_bound)
    phi2 = np.asarray(consts.phi_norm_k2, dtype=float) ** 2
    upper = (1 + eps) * mpf(e_star) + (1 + 1 / eps) * _filter_term(consts.C, phi2) / N
    return float(e_star), float(upper)


def total_bound(e_star_tot: float, consts_uniform: BoundConstants, expected_phi_norms,
                N: int, q: float) -> tuple[float, float]:
    """Total-MSE sandwich with ``eps = N^-q``.

    ``expected_phi_norms`` holds ``E[||phi_j||_{k,2}^2]`` per coordinate.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    if consts_uniform.mode != UNIFORM:
        raise ValueError("total bound needs constants computed in uniform mode")
    if N < consts_uniform.n_threshold:
        raise AssumptionViolation(
            f"N = {N} is below the uniform threshold {consts_uniform.n_threshold}")
    Nq = mpf(N) ** mpf(q)
    upper = (1 + 1 / Nq) * mpf(e_star_tot) + (1 + Nq) * _filter_term(consts_uniform.C, expected_phi_norms) / N
    return float(e_star_tot), float(upper)


def verify_dominance(conditional: BoundConstants, uniform: BoundConstants) -> bool:
    """True iff ``C <= C'`` and ``M <= M'`` coordinate-wise."""
    if conditional.dim != uniform.dim:
        raise ValueError("constants have mismatched dimensions")
    if conditional.k != uniform.k:
        raise ValueError("constants belong to different time indices")
    if conditional.mode != CONDITIONAL or uniform.mode != UNIFORM:
        raise ValueError("expected (conditional, uniform) constants")
    return all(c <= cu for c, cu in zip(conditional.C, uniform.C)) and \
        all(m <= mu for m, mu in zip(conditional.M, uniform.M))


def dominance_inputs_ok(cond: NormEstimates, unif: NormEstimates) -> bool:
    """Uniform sup-norms must dominate the conditional ones entrywise."""
    return (cond.norm_K <= unif.norm_K and cond.norm_rho <= unif.norm_rho
            and bool(np.all(cond.norm_rho_phi2 <= unif.norm_rho_phi2))
            and bool(np.all(cond.norm_rho_phi <= unif.norm_rho_phi)))


def with_threshold(consts: BoundConstants, n: int) -> BoundConstants:
    return replace(consts, n_threshold=int(n))
