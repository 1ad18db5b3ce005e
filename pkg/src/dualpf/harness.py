"""Closed-loop simulation, Monte Carlo campaigns and the conditional MSE sweep.

Each closed-loop step estimates (particle filter) and then controls (dual MPC
or a baseline), mirroring the estimation-then-control split. Runs are
serialised as line-delimited JSON: a header line carrying the seed and the
full config snapshot, one line per step and a terminal line.
"""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import bounds as bd
from .config import CampaignSpec, build_filter_config, build_model, build_mpc
from .dual_control import certainty_equivalent_plan, plan
from .model import ModelSpec
from .oracle import (GridDistribution, OracleError, conditional_mse, grid_correct, grid_predict,
                     regular_axes, run_grid_filter)
from .particle_filter import (FilterDivergence, SelectionWarning, StepDiagnostics, filter_init,
                              filter_step, run_filter)
from .rng import stream


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    seed: int
    trial_index: int
    config: dict[str, Any]
    steps: list[dict[str, Any]] = field(default_factory=list)
    terminal: dict[str, Any] | None = None
    failure: str | None = None

    @property
    def horizon(self) -> int:
        return len(self.steps)

    def states(self) -> np.ndarray:
        rows = [s["state"] for s in self.steps]
        if self.terminal is not None:
            rows.append(self.terminal["state"])
        return np.array(rows)

    def to_jsonl(self) -> str:
        head = {"type": "run", "seed": self.seed, "trial_index": self.trial_index,
                "failure": self.failure, "config": self.config}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps({"type": "step", **s}, sort_keys=True) for s in self.steps]
        if self.terminal is not None:
            lines.append(json.dumps({"type": "terminal", **self.terminal}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "RunRecord":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        head = rows[0]
        if head.get("type") != "run":
            raise ValueError("run record must start with a header line")
        rec = cls(head["seed"], head["trial_index"], head["config"], failure=head["failure"])
        for r in rows[1:]:
            kind = r.pop("type")
            if kind == "step":
                rec.steps.append(r)
            elif kind == "terminal":
                rec.terminal = r
        return rec


def _vec(a) -> list[float]:
    return [float(v) for v in np.ravel(a)]


def _filter_diag(d: StepDiagnostics) -> dict[str, Any]:
    return {"mean_predicted_likelihood": d.mean_predicted_likelihood,
            "redraw_count": d.redraw_count, "selection_accepted": d.selection_accepted,
            "ess_before_resampling": d.ess_before_resampling,
            "effective_sample_size": d.effective_sample_size}


def error_coordinates(spec: ModelSpec) -> list[int]:
    """Coordinates entering the reported position error (x1..x3 for TAN, all otherwise)."""
    return [0, 1, 2] if spec.name == "tan" else list(range(spec.state_dim))


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------


class _Oracle:
    """Incremental grid filter run alongside the particle filter."""

    def __init__(self, spec: ModelSpec, cfg: dict[str, Any]):
        self.spec = spec
        self.auto_expand = bool(cfg.get("auto_expand", False))
        axes = regular_axes(cfg["lo"], cfg["hi"], cfg["counts"])
        self.pred = GridDistribution.from_density(axes, spec.initial_density)
        self.post = None

    def correct(self, y) -> tuple[np.ndarray, float]:
        rho = self.spec.likelihood(y, self.pred.nodes)
        L = float(self.pred.masses @ rho)
        self.post = grid_correct(self.pred, self.spec, y)
        return conditional_mse(self.post)[0], L

    def predicted_likelihood(self, y) -> float:
        return float(self.pred.masses @ self.spec.likelihood(y, self.pred.nodes))

    def predict(self, u) -> None:
        self.pred = grid_predict(self.post, self.spec, u, auto_expand=self.auto_expand)


def _threshold(campaign: CampaignSpec, oracle: _Oracle | None, y) -> float | None:
    sel = campaign.selection
    mode = sel.get("mode", "none")
    if mode == "none":
        return None
    if mode == "constant":
        return float(sel["value"])
    if oracle is None:
        raise ValueError("oracle_fraction selection needs an oracle section")
    return float(sel.get("fraction", 0.5)) * oracle.predicted_likelihood(y)


def run_closed_loop(campaign: CampaignSpec, trial_index: int,
                    particles: int | None = None) -> RunRecord:
    """Simulate one closed-loop trajectory; deterministic in ``(base_seed, trial_index)``."""
    spec, terrain = build_model(campaign)
    fcfg = build_filter_config(campaign, particles)
    mpc, info = build_mpc(campaign)
    truth_rng = stream(campaign.base_seed, trial_index, "truth")
    filter_rng = stream(campaign.base_seed, trial_index, "filter")
    planner_rng = stream(campaign.base_seed, trial_index, "planner")
    snapshot = campaign.to_dict()
    if particles is not None:
        snapshot["filter"] = {**snapshot["filter"], "particle_count": int(particles)}
    rec = RunRecord(campaign.base_seed, trial_index, snapshot)
    coords = error_coordinates(spec)

    x = (spec.initial_sample(1, truth_rng)[0] if campaign.initial_state is None
         else np.asarray(campaign.initial_state, dtype=float))
    y = spec.observation_sample(x, truth_rng)
    oracle = (_Oracle(spec, campaign.oracle)
              if campaign.oracle and spec.state_dim <= 2 else None)
    selection_failures = 0

    def assimilate(pf, u, y):
        nonlocal selection_failures
        th = _threshold(campaign, oracle, y)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", SelectionWarning)
            if pf is None:
                out = filter_init(spec, y, fcfg, filter_rng, th)
            else:
                out = filter_step(pf, spec, u, y, fcfg, filter_rng, th)
        selection_failures += sum(issubclass(w.category, SelectionWarning) for w in caught)
        return out

    def entry(x, y, diag, oracle_mean):
        est = diag.estimate
        e = {"state": _vec(x), "observation": _vec(y), "estimate": _vec(est),
             "sq_error": float(np.sum((x[coords] - est[coords]) ** 2)),
             "filter": _filter_diag(diag)}
        if oracle_mean is not None:
            e["oracle_estimate"] = _vec(oracle_mean)
            e["oracle_sq_error"] = float(np.sum((x[coords] - oracle_mean[coords]) ** 2))
        return e

    try:
        oracle_mean = oracle.correct(y)[0] if oracle else None
        pf, diag = assimilate(None, None, y)
        for k in range(campaign.horizon):
            e = entry(x, y, diag, oracle_mean)
            u, pdiag = _control(campaign, spec, pf, diag, mpc, info, terrain, planner_rng)
            e["k"] = k
            e["control"] = _vec(u)
            e["planner"] = pdiag
            rec.steps.append(e)
            x = spec.transition_sample(x[None, :], u, truth_rng)[0]
            y = spec.observation_sample(x, truth_rng)
            if oracle:
                oracle.predict(u)
                oracle_mean = oracle.correct(y)[0]
            pf, diag = assimilate(pf, u, y)
        rec.terminal = {**entry(x, y, diag, oracle_mean), "k": campaign.horizon,
                        "selection_failures": selection_failures}
    except (FilterDivergence, OracleError, FloatingPointError) as exc:
        rec.failure = f"{type(exc).__name__} at step {len(rec.steps)}: {exc}"
    return rec


def _control(campaign, spec, pf, diag, mpc, info, terrain, rng):
    kind = campaign.controller
    if kind == "zero":
        return np.zeros(spec.control_dim), None
    if kind == "constant":
        return spec.control_set.project(np.asarray(campaign.constant_control, dtype=float)), None
    if kind == "certainty_equivalent":
        u, d = certainty_equivalent_plan(diag.estimate, spec, mpc, rng)
    else:
        u, d = plan(pf, spec, mpc, info, terrain, rng)
    return u, {"best_index": d.best_index, "best_cost": d.best_cost,
               "outside_queries": d.outside_queries}


def replay(record: RunRecord) -> RunRecord:
    """Regenerate a run from its own config snapshot and seed."""
    campaign = CampaignSpec.from_dict(record.config)
    if campaign.base_seed != record.seed:
        raise ValueError("record seed does not match its config snapshot")
    return run_closed_loop(campaign, record.trial_index)


# ---------------------------------------------------------------------------
# Campaigns
# ---------------------------------------------------------------------------


def rough_zone_occupancy(record: RunRecord, split_x: float) -> float:
    """Fraction of visited states (steps and terminal) with ``x1 >= split_x``."""
    s = record.states()
    return float(np.mean(s[:, 0] >= split_x)) if len(s) else float("nan")


def _run_one(args):
    campaign_dict, trial, particles = args
    return run_closed_loop(CampaignSpec.from_dict(campaign_dict), trial, particles).to_jsonl()


def campaign(spec: CampaignSpec, workers: int = 1, out_dir: str | Path | None = None,
             particles: int | None = None) -> list[RunRecord]:
    """Run ``spec.trials`` independent closed-loop trials.

    Trials are independent tasks; ``workers > 1`` farms them out to processes.
    Records are identical whatever the worker count.
    """
    jobs = [(spec.to_dict(), t, particles) for t in range(spec.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            texts = list(pool.map(_run_one, jobs))
    else:
        texts = [_run_one(j) for j in jobs]
    records = [RunRecord.from_jsonl(t) for t in texts]
    if out_dir is not None:
        write_campaign(records, texts, spec, Path(out_dir))
    return records


def summarize(records: Sequence[RunRecord], split_x: float | None = None) -> list[dict[str, Any]]:
    rows = []
    for r in records:
        row = {"trial": r.trial_index, "failed": int(r.failure is not None),
               "terminal_sq_error": r.terminal["sq_error"] if r.terminal else float("nan")}
        if split_x is not None:
            row["rough_occupancy"] = rough_zone_occupancy(r, split_x)
        rows.append(row)
    return rows


def write_campaign(records, texts, spec: CampaignSpec, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for r, t in zip(records, texts):
        (out / f"trial_{r.trial_index:05d}.jsonl").write_text(t)
    rows = summarize(records, spec.split_x)
    write_csv(out / "summary.csv", rows)


def write_csv(path: str | Path, rows: Sequence[dict[str, Any]]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# Conditional MSE sweep
# ---------------------------------------------------------------------------


SWEEP_COLUMNS = ("k", "N", "e_N_mean", "e_N_se", "e_star", "bound_lower", "bound_upper")


@dataclass
class FixedHistory:
    states: np.ndarray
    observations: np.ndarray
    controls: np.ndarray


def fixed_history(campaign: CampaignSpec, spec: ModelSpec, trial: int = 0) -> FixedHistory:
    """Truth trajectory under the campaign's open-loop control (zero or constant)."""
    rng = stream(campaign.base_seed, trial, "truth")
    u = (np.zeros(spec.control_dim) if campaign.constant_control is None
         else np.asarray(campaign.constant_control, dtype=float))
    x = (spec.initial_sample(1, rng)[0] if campaign.initial_state is None
         else np.asarray(campaign.initial_state, dtype=float))
    states, obs, ctrls = [x], [spec.observation_sample(x, rng)], []
    for _ in range(campaign.horizon):
        x = spec.transition_sample(x[None, :], u, rng)[0]
        states.append(x)
        obs.append(spec.observation_sample(x, rng))
        ctrls.append(spec.control_set.project(u))
    return FixedHistory(np.array(states), np.array(obs), np.array(ctrls))


def conditional_constants(spec: ModelSpec, steps, history: FixedHistory, eps: float,
                          C_tilde: float) -> list[bd.BoundConstants]:
    """Conditional-mode constants along one information vector.

    ``gamma_k`` is taken as the oracle predicted mean likelihood of this
    history; norms are swept over the oracle grid.
    """
    phis = bd.phi_norms([s.second_moments for s in steps])
    out = [bd.initial_constants(spec.state_dim, C_tilde, bd.CONDITIONAL, phis[0], eps,
                                steps[0].mean_pred_likelihood)]
    for k in range(1, len(steps)):
        s = steps[k]
        sweep = bd.SweepGrid(states=np.concatenate([s.predicted.nodes, steps[k - 1].posterior.nodes]),
                             kernel_offsets=np.zeros((1, spec.state_dim)))
        norms = bd.estimate_norms(spec, sweep, bd.CONDITIONAL, observation=history.observations[k],
                                  control=history.controls[k - 1])
        L = s.mean_pred_likelihood
        out.append(bd.recurse_constants(out[-1], norms, L, eps, C_tilde, L,
                                        s.mean_post_likelihood, phis[k]))
    return out


def conditional_errors(estimates: np.ndarray, steps) -> np.ndarray:
    """``E[||X_k - xhat_k||^2 | I_k]`` for each k, by quadrature over the oracle posterior."""
    out = np.empty(len(steps))
    for k, s in enumerate(steps):
        d = s.posterior.nodes - estimates[k]
        out[k] = float(s.posterior.masses @ np.sum(d * d, axis=1))
    return out


@dataclass
class SweepResult:
    rows: list[dict[str, Any]]
    e_N: dict[int, np.ndarray]       # N -> (repetitions_used, k+1) conditional errors
    e_star: np.ndarray
    failures: dict[int, int]
    constants: list[bd.BoundConstants] | None
    notice: str = ""


def mse_sweep(campaign: CampaignSpec, repetitions: int | None = None,
              out_path: str | Path | None = None, with_bounds: bool = True) -> SweepResult:
    """Conditional MSE of the particle estimate for each N over a fixed history."""
    spec, _ = build_model(campaign)
    reps = repetitions or campaign.repetitions
    hist = fixed_history(campaign, spec)
    notice = ""
    steps = None
    if campaign.oracle and spec.state_dim <= 2:
        axes = regular_axes(campaign.oracle["lo"], campaign.oracle["hi"], campaign.oracle["counts"])
        steps = run_grid_filter(spec, axes, hist.observations, hist.controls,
                                auto_expand=bool(campaign.oracle.get("auto_expand", False)))
    else:
        notice = "no oracle for this model: e_star and bound columns omitted"
    frac = float(campaign.selection.get("fraction", 0.5))
    thresholds = None
    if steps is not None and campaign.selection.get("mode", "oracle_fraction") != "none":
        thresholds = [frac * s.mean_pred_likelihood for s in steps]
    consts = None
    if steps is not None and with_bounds:
        b = campaign.bounds
        consts = conditional_constants(spec, steps, hist, float(b.get("eps", 0.1)),
                                       float(b.get("C_tilde", 1.0)))
    e_star = np.array([s.e_star for s in steps]) if steps is not None else None
    rows, errors, failures = [], {}, {}
    for N in campaign.n_sweep:
        cfg = build_filter_config(campaign, N)
        per_rep, failed = [], 0
        for r in range(reps):
            rng = stream(campaign.base_seed, r, f"sweep/{N}")
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", SelectionWarning)
                    est, _ = run_filter(spec, hist.observations, hist.controls, cfg, rng, thresholds)
            except FilterDivergence:
                failed += 1
                continue
            if steps is not None:
                per_rep.append(conditional_errors(est, steps))
            else:
                per_rep.append(np.sum((hist.states - est) ** 2, axis=1))
        err = np.array(per_rep)
        errors[N], failures[N] = err, failed
        mean = err.mean(axis=0)
        se = err.std(axis=0, ddof=1) / np.sqrt(len(err))
        for k in range(len(mean)):
            row = {"k": k, "N": N, "e_N_mean": float(mean[k]), "e_N_se": float(se[k])}
            if steps is not None:
                row["e_star"] = float(e_star[k])
                lo, up = float(e_star[k]), float("nan")
                if consts is not None and N >= consts[k].n_threshold:
                    lo, up = bd.conditional_bound(e_star[k], consts[k], N,
                                                  float(campaign.bounds.get("eps_bound", 0.1)))
                row["bound_lower"], row["bound_upper"] = lo, up
                row["n_threshold"] = consts[k].n_threshold if consts is not None else ""
            row["failed_repetitions"] = failed
            rows.append(row)
    if out_path is not None:
        write_csv(out_path, rows)
    return SweepResult(rows, errors, e_star, failures, consts, notice)


def bound_tables(campaign: CampaignSpec, spec: ModelSpec | None = None, trials: int | None = None
                 ) -> tuple[list[bd.BoundConstants], list[bd.BoundConstants]]:
    """Conditional constants along history 0 and uniform constants for the same horizon.

    The uniform ``gamma_k`` is the smallest oracle predicted mean likelihood over
    ``trials`` histories (history 0 included), so it never exceeds the value the
    conditional recursion uses.
    """
    if not campaign.oracle:
        raise ValueError("bound tables need an oracle section in the config")
    spec = spec or build_model(campaign)[0]
    b = campaign.bounds
    eps, C_tilde = float(b.get("eps", 0.1)), float(b.get("C_tilde", 1.0))
    axes = regular_axes(campaign.oracle["lo"], campaign.oracle["hi"], campaign.oracle["counts"])
    auto = bool(campaign.oracle.get("auto_expand", False))
    histories, L = [], []
    for t in range(trials or campaign.trials):
        h = fixed_history(campaign, spec, t)
        steps = run_grid_filter(spec, axes, h.observations, h.controls, auto_expand=auto)
        histories.append((h, steps))
        L.append([s.mean_pred_likelihood for s in steps])
    gammas = np.min(np.array(L), axis=0)
    hist, steps = histories[0]
    cond = conditional_constants(spec, steps, hist, eps, C_tilde)
    from .tan import default_sweep

    norms = bd.estimate_norms(spec, default_sweep(spec), bd.UNIFORM)
    unif = [bd.initial_constants(spec.state_dim, C_tilde, bd.UNIFORM, None, eps, gammas[0])]
    for k in range(1, len(steps)):
        unif.append(bd.recurse_constants(unif[-1], norms, gammas[k], eps, C_tilde))
    return cond, unif
