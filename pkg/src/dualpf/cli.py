"""Command-line entry point: ``dualpf <subcommand> [options]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import mpmath
import numpy as np

from . import bounds as bd
from .config import CampaignSpec, build_model, load_config
from .harness import (bound_tables, campaign, fixed_history, mse_sweep, run_closed_loop, summarize,
                      write_csv)
from .oracle import regular_axes, run_grid_filter
from .tan import verify_assumptions
from .terrain import GENERATORS, generate, write_ascii_grid


def _load(args) -> CampaignSpec:
    spec = load_config(args.config) if args.config else CampaignSpec()
    changes = {}
    if args.seed is not None:
        changes["base_seed"] = args.seed
    if args.trials is not None:
        changes["trials"] = args.trials
    if args.particles is not None:
        changes["filter"] = {"particle_count": args.particles}
    return spec.replace(**changes) if changes else spec


def _out(args, default: str) -> Path:
    return Path(args.out) if args.out else Path(default)


def cmd_run(args) -> int:
    spec = _load(args)
    rec = run_closed_loop(spec, args.trial)
    out = _out(args, spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"trial_{args.trial:05d}.jsonl"
    path.write_text(rec.to_jsonl())
    status = rec.failure or f"terminal squared error {rec.terminal['sq_error']:.4g}"
    print(f"{path}: {len(rec.steps)} steps, {status}")
    return 0 if rec.failure is None else 1


def cmd_campaign(args) -> int:
    spec = _load(args)
    out = _out(args, spec.out_dir)
    records = campaign(spec, workers=args.workers, out_dir=out)
    rows = summarize(records, spec.split_x)
    failed = sum(r["failed"] for r in rows)
    errs = [r["terminal_sq_error"] for r in rows if not r["failed"]]
    print(f"{len(records)} trials, {failed} failed, mean terminal squared error "
          f"{np.mean(errs) if errs else float('nan'):.4g}; records in {out}")
    return 0


def cmd_mse_sweep(args) -> int:
    spec = _load(args)
    out = _out(args, "mse_sweep.csv")
    res = mse_sweep(spec, repetitions=args.repetitions, out_path=out)
    if res.notice:
        print(f"notice: {res.notice}")
    print(f"wrote {len(res.rows)} rows to {out}")
    return 0


def _oracle_steps(spec: CampaignSpec, model, trial: int = 0):
    if not spec.oracle:
        raise SystemExit("this subcommand needs an oracle section in the config")
    hist = fixed_history(spec, model, trial)
    axes = regular_axes(spec.oracle["lo"], spec.oracle["hi"], spec.oracle["counts"])
    return hist, run_grid_filter(model, axes, hist.observations, hist.controls,
                                 auto_expand=bool(spec.oracle.get("auto_expand", False)))


def cmd_bounds(args) -> int:
    spec = _load(args)
    if not spec.oracle:
        raise SystemExit("this subcommand needs an oracle section in the config")
    cond, unif = bound_tables(spec)
    rows = []
    for consts in (cond, unif):
        for c in consts:
            for j in range(c.dim):
                rows.append({"k": c.k, "j": j + 1, "C": mp_str(c.C[j]), "M": mp_str(c.M[j]),
                             "alpha": mp_str(c.alpha[j]), "beta": mp_str(c.beta[j]),
                             "N_threshold": c.n_threshold, "mode": c.mode})
    out = _out(args, "bounds.csv")
    write_csv(out, rows)
    dominated = all(bd.verify_dominance(a, u) for a, u in zip(cond, unif))
    print(f"wrote {len(rows)} rows to {out}; dominance C <= C', M <= M': {dominated}")
    return 0


def mp_str(v) -> str:
    return mpmath.nstr(v, 17)


def cmd_oracle(args) -> int:
    spec = _load(args)
    model, _ = build_model(spec)
    _, steps = _oracle_steps(spec, model)
    rows = []
    for s in steps:
        for stage, dist in (("predicted", s.predicted), ("posterior", s.posterior)):
            for node, mass in zip(dist.nodes, dist.masses):
                row = {"k": s.k, "stage": stage}
                row.update({f"x{i + 1}": float(v) for i, v in enumerate(node)})
                row["mass"] = float(mass)
                rows.append(row)
    out = _out(args, "oracle.csv")
    write_csv(out, rows)
    print(f"wrote {len(rows)} rows ({len(steps)} steps) to {out}")
    return 0


def _parse_value(text: str):
    try:
        return [float(v) for v in text.split(",")] if "," in text else float(text)
    except ValueError:
        return text


def cmd_terrain_gen(args) -> int:
    kw = {}
    for item in args.param or []:
        key, _, val = item.partition("=")
        v = _parse_value(val)
        if key in ("n_rows", "n_cols", "seed"):
            v = int(v)
        if isinstance(v, list):
            v = tuple(v)
        kw[key] = v
    if args.seed is not None and args.kind == "two_zone":
        kw.setdefault("seed", args.seed)
    terr = generate(args.kind, **kw)
    out = _out(args, f"{args.kind}.asc")
    write_ascii_grid(terr, out)
    print(f"wrote {terr.n_rows}x{terr.n_cols} {args.kind} map to {out}")
    return 0


def cmd_verify(args) -> int:
    spec = _load(args)
    if args.no_truncation:
        model_cfg = dict(spec.model)
        if model_cfg["kind"] == "tan":
            model_cfg["tan"] = {**model_cfg.get("tan", {}), "noise_support_radius": float("inf")}
        else:
            model_cfg["noise_support_radius"] = float("inf")
        spec = spec.replace(model=model_cfg)
    model, _ = build_model(spec)
    report = verify_assumptions(model, margin=args.margin)
    print("\n".join(report.lines()))
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="campaign YAML file")
    common.add_argument("--seed", type=int, help="base seed (u64)")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--trials", type=int, help="number of trials")
    common.add_argument("--particles", type=int, help="particle count N")

    p = argparse.ArgumentParser(prog="dualpf",
                                description="Selection particle filter, MSE bounds and dual MPC.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", parents=[common], help="single closed-loop run")
    s.add_argument("--trial", type=int, default=0)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("campaign", parents=[common], help="Monte Carlo campaign")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_campaign)

    s = sub.add_parser("mse-sweep", parents=[common], help="conditional MSE versus N (CSV)")
    s.add_argument("--repetitions", type=int)
    s.set_defaults(func=cmd_mse_sweep)

    s = sub.add_parser("bounds", parents=[common], help="bound constants table (CSV)")
    s.set_defaults(func=cmd_bounds)

    s = sub.add_parser("oracle", parents=[common], help="grid oracle snapshots (CSV)")
    s.set_defaults(func=cmd_oracle)

    t = sub.add_parser("terrain", help="terrain utilities")
    tsub = t.add_subparsers(dest="terrain_command", required=True)
    s = tsub.add_parser("gen", parents=[common], help="write a synthetic ASCII grid map")
    s.add_argument("kind", choices=sorted(GENERATORS))
    s.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="generator keyword, e.g. --param slope=1,0")
    s.set_defaults(func=cmd_terrain_gen)

    s = sub.add_parser("verify-assumptions", parents=[common],
                       help="boundedness checks of K and rho")
    s.add_argument("--margin", type=float, default=1.0)
    s.add_argument("--no-truncation", action="store_true",
                   help="use untruncated observation noise")
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
