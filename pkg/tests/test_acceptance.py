"""Exit criteria, each run at its stated tolerance.

Every test prints exactly one ``criterion N ...: PASS|FAIL`` line, visible
even without ``-s``. Run only these with ``pytest -m acceptance``.
"""

import time

import numpy as np
import pytest

from dualpf import bounds as bd
from dualpf.cli import main as cli_main
from dualpf.config import build_model, load_config
from dualpf.experiments import ambiguity_experiment, dual_effect_experiment, total_mse_experiment
from dualpf.harness import RunRecord, bound_tables, fixed_history, mse_sweep, replay, run_closed_loop
from dualpf.oracle import kalman_1d, regular_axes, run_grid_filter

pytestmark = pytest.mark.acceptance

BENCHMARKS = ("linear_gaussian", "tan_slice_two_hill")
SUITE = ("linear_gaussian", "tan_slice_two_hill", "tan_slice_ramp")


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail, seconds, budget):
        line = (f"criterion {number} {title}: {'PASS' if ok else 'FAIL'} "
                f"({detail}; {seconds:.1f} s of {budget:.0f} s)")
        with capsys.disabled():
            print("\n" + line)
        return line
    return emit


@pytest.fixture(scope="module")
def sweeps(configs_dir_module):
    out = {}
    for name in BENCHMARKS:
        t0 = time.perf_counter()
        spec = load_config(configs_dir_module / f"{name}.yaml")
        res = mse_sweep(spec, repetitions=1000, with_bounds=False)
        out[name] = (spec, res, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="module")
def configs_dir_module():
    from conftest import CONFIGS
    return CONFIGS


def _sweep_table(res):
    tab = {}
    for r in res.rows:
        tab[(r["N"], r["k"])] = r
    return tab


def test_criterion_1_optimality_floor(sweeps, report):
    worst, elapsed, ok = [], 0.0, True
    for name, (spec, res, secs) in sweeps.items():
        elapsed += secs
        assert spec.horizon == 20 and list(spec.n_sweep) == [50, 200, 800, 3200]
        z = min((r["e_N_mean"] - r["e_star"]) / max(r["e_N_se"], 1e-300) for r in res.rows)
        ok &= all(r["e_N_mean"] >= r["e_star"] - 3 * r["e_N_se"] for r in res.rows)
        worst.append(f"{name} min (e_N - e*)/SE = {z:.2f}")
    ok &= elapsed < 300
    report(1, "optimality floor", ok, "; ".join(worst), elapsed, 300)
    assert ok


def test_criterion_2_conditional_convergence(sweeps, report):
    ok, notes, elapsed = True, [], 0.0
    for name, (spec, res, secs) in sweeps.items():
        elapsed += secs
        tab = _sweep_table(res)
        rel, sep = [], []
        for k in range(spec.horizon + 1):
            hi, lo = tab[(3200, k)], tab[(50, k)]
            gap_hi, gap_lo = hi["e_N_mean"] - hi["e_star"], lo["e_N_mean"] - lo["e_star"]
            rel.append(gap_hi / hi["e_star"])
            sep.append((gap_lo - gap_hi) / np.hypot(lo["e_N_se"], hi["e_N_se"]))
        ok &= max(rel) < 0.10 and min(sep) > 2.0
        notes.append(f"{name} max gap(3200)/e* = {max(rel):.4f}, min separation = {min(sep):.1f} SE")
    ok &= elapsed < 600
    report(2, "conditional convergence", ok, "; ".join(notes), elapsed, 600)
    assert ok


def test_criterion_3_total_mse_sandwich(configs_dir, report):
    t0 = time.perf_counter()
    spec = load_config(configs_dir / "tan_slice_ramp.yaml")
    b = spec.bounds
    assert (b["C_tilde"], b["eps"], b["q"]) == (1.0, 0.1, 0.5) and spec.horizon == 5
    res = total_mse_experiment(spec, trajectories=500)
    elapsed = time.perf_counter() - t0
    covered = [r for r in res.rows if r["covered"]]
    lower_ok = all(r["e_tot_N"] >= r["e_tot_star"] - 3 * r["diff_se"] for r in covered)
    upper_ok = all(r["e_tot_N"] <= r["bound_upper"] + 3 * r["e_tot_N_se"] for r in covered)
    ks = sorted({r["k"] for r in covered})
    # the floor must hold for every N, covered or not
    floor_all = all(r["e_tot_N"] >= r["e_tot_star"] - 3 * r["diff_se"] for r in res.rows)
    ok = bool(covered) and lower_ok and upper_ok and floor_all and elapsed < 900
    n_bar = ", ".join(f"{n:.3g}" for n in res.n_bar)
    report(3, "total-MSE sandwich", ok,
           f"{len(covered)} covered (k, N) pairs at k in {ks}; N_bar = [{n_bar}]; "
           f"failed filter runs {sum(res.failures.values())}", elapsed, 900)
    assert ok


def test_criterion_4_constant_recursions(configs_dir, report):
    t0 = time.perf_counter()
    c0 = bd.initial_constants(6, C_tilde=1.7)
    unit_ok = (all(m == 3 for m in c0.M) and all(c == 8 * bd.mpf(1.7) for c in c0.C)
               and bd.next_M(0, 0.3, 11) == 2 and bd.next_M(1, 0.5, 3) == 27)
    unit_secs = time.perf_counter() - t0
    dom = []
    for name in SUITE:
        spec = load_config(configs_dir / f"{name}.yaml").replace(horizon=10, trials=3)
        cond, unif = bound_tables(spec)
        dom.append((name, all(bd.verify_dominance(c, u) for c, u in zip(cond, unif)), len(cond) - 1))
    elapsed = time.perf_counter() - t0
    ok = unit_ok and unit_secs < 1.0 and all(d for _, d, _ in dom)
    detail = f"unit cases {'ok' if unit_ok else 'wrong'}; dominance " + \
        ", ".join(f"{n} k<={k}: {d}" for n, d, k in dom) + \
        f" (oracle runs for dominance took {elapsed - unit_secs:.1f} s)"
    report(4, "constant recursions", ok, detail, unit_secs, 1)
    assert ok


def test_criterion_5_verify_assumptions(configs_dir, report, capsys):
    t0 = time.perf_counter()
    cfg = str(configs_dir / "tan_default.yaml")
    passed = cli_main(["verify-assumptions", "--config", cfg])
    failed = cli_main(["verify-assumptions", "--config", cfg, "--no-truncation"])
    capsys.readouterr()
    elapsed = time.perf_counter() - t0
    ok = passed == 0 and failed == 1 and elapsed < 30
    report(5, "boundedness checks", ok, f"truncated exit {passed}, untruncated exit {failed}", elapsed, 30)
    assert ok


def test_criterion_6_dual_effect(configs_dir, report):
    t0 = time.perf_counter()
    spec = load_config(configs_dir / "dual_two_zone.yaml")
    assert spec.trials == 100
    base, dual = dual_effect_experiment(spec, spec.mpc["info_weight"])
    elapsed = time.perf_counter() - t0
    occ_gain = dual.mean_occupancy - base.mean_occupancy
    sep = (base.mse - dual.mse) / np.hypot(base.mse_se, dual.mse_se)
    ok = occ_gain >= 0.20 and sep > 3.0 and elapsed < 1200
    report(6, "dual effect", ok,
           f"occupancy {base.mean_occupancy:.3f} -> {dual.mean_occupancy:.3f}, "
           f"terminal MSE {base.mse:.1f}±{base.mse_se:.1f} -> {dual.mse:.1f}±{dual.mse_se:.1f} "
           f"({sep:.1f} SE); diverged runs {base.failures} / {dual.failures}", elapsed, 1200)
    assert ok


def test_criterion_7_multimodality(configs_dir, report):
    t0 = time.perf_counter()
    spec = load_config(configs_dir / "two_hill_ambiguity.yaml")
    res = ambiguity_experiment(spec, split_x=1000.0, steps=3)
    elapsed = time.perf_counter() - t0
    ok = min(res.cluster_mass) > 0.2 and res.gaussian_modes == 1 and elapsed < 60
    report(7, "multimodality", ok,
           f"cluster masses {res.cluster_mass[0]:.3f} / {res.cluster_mass[1]:.3f}, "
           f"Gaussian summary modes {res.gaussian_modes}", elapsed, 60)
    assert ok


def test_criterion_8_oracle_fidelity(configs_dir, report):
    t0 = time.perf_counter()
    spec = load_config(configs_dir / "linear_gaussian.yaml")
    model, _ = build_model(spec)
    h = fixed_history(spec, model)
    axes = regular_axes(spec.oracle["lo"], spec.oracle["hi"], spec.oracle["counts"])
    steps = run_grid_filter(model, axes, h.observations, h.controls)
    p = model.params
    km, kv = kalman_1d(p["a"], p["b"], p["q"], p["c"], p["r"], p["m0"], p["p0"], h.observations, h.controls)
    cell = axes[0][1] - axes[0][0]
    dm = max(abs(s.mean[0] - m) for s, m in zip(steps, km))
    dv = max(abs(s.e_star - v) / v for s, v in zip(steps, kv))
    elapsed = time.perf_counter() - t0
    ok = len(steps) == 21 and dm < cell and dv < 1e-3 and elapsed < 60
    report(8, "oracle fidelity", ok, f"max mean error {dm:.2e} (cell {cell:.3g}), "
           f"max relative variance error {dv:.2e}", elapsed, 60)
    assert ok


def test_criterion_9_determinism(configs_dir, report):
    t0 = time.perf_counter()
    checks = []
    for name, trial in (("dual_two_zone", 7), ("linear_gaussian", 3), ("tan_slice_two_hill", 0)):
        spec = load_config(configs_dir / f"{name}.yaml")
        if name == "dual_two_zone":
            spec = spec.replace(horizon=10)
        text = run_closed_loop(spec, trial).to_jsonl()
        again = replay(RunRecord.from_jsonl(text)).to_jsonl()
        checks.append(text == again)
    elapsed = time.perf_counter() - t0
    ok = all(checks) and elapsed < 60
    report(9, "determinism", ok, f"{sum(checks)}/{len(checks)} records replayed byte-identically",
           elapsed, 60)
    assert ok
