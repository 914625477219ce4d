"""Command-line entry point: ``dmdbench run | verify | sweep | wanes``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    build_weights,
    check_chainsum,
    check_lemma1,
    fit_loglog,
    theoretical_gap_bound,
    wanes_from_gaps,
)
from .attack import check_calendar
from .experiment import (
    ConfigError,
    Experiment,
    apply_overrides,
    bound_margin,
    config_hash,
    dump_config,
    load_config,
    trial_seeds,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_T_GRID = (256, 512, 1024, 2048, 4096, 8192)
DEFAULT_D_GRID = (1, 2, 4, 8)


class UsageError(Exception):
    pass


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")


def _prepare(args) -> tuple[dict, list[str], Path]:
    cfg = load_config(args.config)
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.trials is not None:
        overrides.append(f"trials={args.trials}")
    cfg = apply_overrides(cfg, overrides)
    out = Path(args.out or os.environ.get("DMD_OUT_DIR") or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return cfg, overrides, out


def _manifest(out: Path, cfg: dict, overrides: list[str], seeds: list[int], files: list[str], command: str) -> None:
    (out / "config.json").write_text(dump_config(cfg))
    files = ["config.json"] + files
    _write_json(
        out / "manifest.json",
        {
            "command": command,
            "code_version": __version__,
            "config_hash": config_hash(cfg),
            "overrides": overrides,
            "seed_derivation": "splitmix64 stream from the master seed; trial i uses output i",
            "master_seed": cfg["seed"],
            "trial_seeds": seeds,
            "files": {name: _sha256(out / name) for name in files},
        },
    )


def _base_summary(exp: Experiment) -> dict:
    return {
        "sigma": exp.oracle.sigma,
        "latency_bound": exp.oracle.bound,
        "kappa": exp.oracle.kappa,
        "sigma_psi": exp.mirror.strong_convexity,
        "d1": exp.d1,
        "design_radius": exp.design_radius,
        "budget": exp.budget,
    }


def cmd_run(args) -> int:
    cfg, overrides, out = _prepare(args)
    exp = Experiment(cfg)
    seeds = trial_seeds(cfg["seed"], 1)
    traj = exp.run_trials(seeds)[0]
    ids = exp.network.path_ids
    traj.write_csv(out / "trajectory.csv", ids)
    traj.write_samples_csv(out / "samples.csv", ids)
    traj.calendar.schedule.write_csv(out / "schedule.csv")
    solution = {
        "equilibrium": exp.equilibrium.to_dict(),
        "path_ids": list(ids),
        "eta": traj.eta,
        "design_eta": exp.design_eta(),
        "T": traj.horizon,
        "final_flow": [float(x) for x in traj.mu[-1]],
        "mean_flow": [float(x) for x in traj.mean_flow],
        "average_gap": traj.average_gap,
        "mean_flow_gap": traj.mean_flow_gap,
        "final_bregman_to_star": float(traj.bregman_to_star[-1]),
        **_base_summary(exp),
    }
    _write_json(out / "solution.json", solution)
    _manifest(out, cfg, overrides, seeds, ["trajectory.csv", "samples.csv", "schedule.csv", "solution.json"], "run")
    print(f"T={traj.horizon} eta={traj.eta:.6g} average gap={traj.average_gap:.6g} mean-flow gap={traj.mean_flow_gap:.6g}")
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg, overrides, out = _prepare(args)
    exp = Experiment(cfg)
    T, d, delta = exp.T, exp.budget, exp.delta
    seeds = trial_seeds(cfg["seed"], cfg["trials"])
    trajs = exp.run_trials(seeds, jobs=args.jobs)
    sol = exp.equilibrium
    sigma_psi, L = exp.mirror.strong_convexity, exp.oracle.bound
    eta, design = exp.eta(), exp.design_eta()

    lemma_fail = chain_fail = cal_fail = None
    lemma_bad = chain_bad = cal_bad = checks = 0
    margins = []
    bound = theoretical_gap_bound(exp.d1, exp.oracle.sigma, sigma_psi, exp.oracle.kappa, d, T, eta, delta)
    for seed, traj in zip(seeds, trajs):
        cal_errors = check_calendar(traj.calendar)
        if cal_errors:
            cal_bad += 1
            cal_fail = cal_fail or (seed, cal_errors[0])
        certs = check_lemma1(traj, sol.flow, sigma_psi, traj.calendar.budget, L)
        checks += len(certs)
        for c in certs:
            if not c.passed:
                lemma_bad += 1
                lemma_fail = lemma_fail or (seed, c.t)
        for t, ok in enumerate(check_chainsum(traj, sol.flow, sigma_psi, traj.calendar.budget, L), start=1):
            if not ok:
                chain_bad += 1
                chain_fail = chain_fail or (seed, t)
        margins.append(bound_margin(traj, bound.rhs))

    weights = build_weights(T, d, eta, exp.oracle.sigma, sigma_psi, design_eta=design)
    violations = int(np.sum(np.asarray(margins) < 0))
    rate = violations / len(trajs)
    results = {
        "lemma1": lemma_bad == 0,
        "chainsum": chain_bad == 0,
        "calendar": cal_bad == 0,
        "weights": weights.ok,
        "bound_violation_rate": rate <= delta,
    }
    report = {
        "T": T,
        "trials": len(trajs),
        "eta": eta,
        "design_eta": design,
        **_base_summary(exp),
        "round_checks": checks,
        "lemma1": {"violations": lemma_bad, "first_failure": _failure(lemma_fail)},
        "chainsum": {"violations": chain_bad, "first_failure": _failure(chain_fail)},
        "calendar": {"failing_trials": cal_bad, "first_failure": list(cal_fail) if cal_fail else None},
        "weights": {"ok": weights.ok, "violations": weights.violations, "scale_a": weights.scale_a},
        "bound": {
            "rhs": bound.rhs,
            "violations": violations,
            "rate": rate,
            "allowed": delta,
            "min_margin": float(np.min(margins)),
        },
        "results": results,
        "passed": all(results.values()),
    }
    _write_json(out / "verify.json", report)
    _manifest(out, cfg, overrides, seeds, ["verify.json"], "verify")

    print(f"lemma1 round checks: {checks}, violations: {lemma_bad}")
    print(f"chain-sum violations: {chain_bad}")
    print(f"calendar failures: {cal_bad}")
    print(f"weight conditions: {'ok' if weights.ok else '; '.join(weights.violations)}")
    print(f"bound violations: {violations}/{len(trajs)} (allowed rate {delta})")
    if report["passed"]:
        print("PASS")
        return EXIT_OK
    for name, fail in (("lemma1", lemma_fail), ("chainsum", chain_fail)):
        if fail:
            print(f"FAIL {name}: first failure at seed={fail[0]} t={fail[1]}")
    if cal_fail:
        print(f"FAIL calendar: seed={cal_fail[0]}: {cal_fail[1]}")
    if not weights.ok:
        print(f"FAIL weights: {weights.violations[0]}")
    if rate > delta:
        worst = int(np.argmin(margins))
        print(f"FAIL bound: violation rate {rate:.3g} > {delta}; worst seed={seeds[worst]} t={T}")
    return EXIT_FAIL


def _failure(fail):
    return {"seed": fail[0], "t": fail[1]} if fail else None


def _parse_grid(text: str | None, default) -> list[int]:
    if text is None:
        return list(default)
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"grid must be comma-separated integers: {text!r}") from exc


def cmd_sweep(args) -> int:
    cfg, overrides, out = _prepare(args)
    axis = args.axis
    grid = _parse_grid(args.grid, DEFAULT_T_GRID if axis == "T" else DEFAULT_D_GRID)
    if axis == "T" and len(grid) < 4:
        raise UsageError("T-axis sweep needs grid length ≥ 4")
    if axis == "T" and min(grid) < 128:
        raise UsageError("every T in the grid must be ≥ 128")
    if axis == "d" and cfg["attack"]["strategy"] == "none":
        cfg = apply_overrides(cfg, ["attack.strategy=constant"])
        overrides.append("attack.strategy=constant")
    exp = Experiment(cfg)
    seeds = trial_seeds(cfg["seed"], cfg["trials"])
    sigma_psi = exp.mirror.strong_convexity

    summary, cells = [], []
    for value in grid:
        T, d = (value, exp.budget) if axis == "T" else (exp.T, value)
        trajs = exp.run_trials(seeds, T=T, d=d if axis == "d" else None, jobs=args.jobs)
        eta = trajs[0].eta
        bound = theoretical_gap_bound(exp.design_radius, exp.oracle.sigma, sigma_psi, exp.oracle.kappa, d, T, eta, exp.delta)
        gaps = np.array([t.average_gap for t in trajs])
        flow_gaps = np.array([t.mean_flow_gap for t in trajs])
        q25, med, q75 = np.quantile(gaps, [0.25, 0.5, 0.75])
        summary.append(
            {"value": value, "T": T, "d": d, "eta": eta, "median": med, "q25": q25, "q75": q75, "bound": bound.rate_bound,
             "median_mean_flow": float(np.median(flow_gaps))}
        )
        for i, (s, g, fg) in enumerate(zip(seeds, gaps, flow_gaps)):
            cells.append((i, s, T, d, g, fg, bound.rate_bound, g <= bound.rate_bound))

    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([axis, "median_gap", "q25", "q75", "bound", "median_mean_flow_gap"])
        for row in summary:
            w.writerow([row["value"], _fmt(row["median"]), _fmt(row["q25"]), _fmt(row["q75"]), _fmt(row["bound"]), _fmt(row["median_mean_flow"])])
    with open(out / "sweep_cells.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "seed", "T", "d", "gap", "mean_flow_gap", "bound", "within_bound"])
        for i, s, T, d, g, fg, b, ok in cells:
            w.writerow([i, s, T, d, _fmt(g), _fmt(fg), _fmt(b), int(ok)])

    within = all(row["median"] <= row["bound"] for row in summary)
    report = {"axis": axis, "grid": grid, "cells": summary, "medians_within_bound": within, **_base_summary(exp)}
    checks = {"medians_within_bound": within}
    if axis == "T":
        fit = fit_loglog([r["T"] for r in summary], [r["median"] for r in summary])
        report.update(slope=fit.slope, stderr=fit.stderr)
        if all(r["median_mean_flow"] > 0 for r in summary):
            flow_fit = fit_loglog([r["T"] for r in summary], [r["median_mean_flow"] for r in summary])
            report.update(mean_flow_slope=flow_fit.slope, mean_flow_stderr=flow_fit.stderr)
        print(f"slope={fit.slope:.4f} stderr={fit.stderr:.4f}")
    else:
        medians = [r["median"] for r in summary]
        checks["non_decreasing_in_d"] = bool(all(b >= a for a, b in zip(medians, medians[1:])))
        report["non_decreasing_in_d"] = checks["non_decreasing_in_d"]
    report["passed"] = all(checks.values())
    _write_json(out / "sweep.json", report)
    _manifest(out, cfg, overrides, seeds, ["sweep.csv", "sweep_cells.csv", "sweep.json"], "sweep")
    for row in summary:
        print(f"{axis}={row['value']}: median gap {row['median']:.4g} (bound {row['bound']:.4g})")
    print("PASS" if report["passed"] else "FAIL")
    return EXIT_OK if report["passed"] else EXIT_FAIL


def _parse_epsilon(text: str) -> float | None:
    if text == "theoretical":
        return None
    try:
        eps = float(text)
    except ValueError as exc:
        raise UsageError(f"--epsilon must be 'theoretical', a number or 'inf', got {text!r}") from exc
    if not eps > 0:
        raise UsageError("epsilon must be positive")
    return eps


def cmd_wanes(args) -> int:
    cfg, overrides, out = _prepare(args)
    if cfg["trials"] < 100:
        raise UsageError("wanes needs at least 100 trials")
    explicit = _parse_epsilon(args.epsilon)
    exp = Experiment(cfg)
    seeds = trial_seeds(cfg["seed"], cfg["trials"])
    trajs = exp.run_trials(seeds, jobs=args.jobs)
    eta = exp.eta()
    theory = theoretical_gap_bound(
        exp.design_radius, exp.oracle.sigma, exp.mirror.strong_convexity, exp.oracle.kappa, exp.budget, exp.T, eta, exp.delta
    ).rate_bound
    eps = theory if explicit is None else explicit
    est = wanes_from_gaps([t.mean_flow_gap for t in trajs], eps, exp.delta, theory)
    data = est.to_dict()
    data["seeds"] = seeds
    _write_json(out / "wanes.json", data)
    _manifest(out, cfg, overrides, seeds, ["wanes.json"], "wanes")
    eps_text = "inf" if math.isinf(eps) else f"{eps:.6g}"
    print(f"epsilon={eps_text} P_hat={est.probability:.4f} 95% CI=[{est.interval[0]:.4f}, {est.interval[1]:.4f}] target>={1 - exp.delta}")
    print("PASS" if est.passed else "FAIL")
    return EXIT_OK if est.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmdbench", description="Delayed mirror descent experiments on congestion games.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON config path")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory (default: $DMD_OUT_DIR, then config output_dir)")
    common.add_argument("--trials", type=int, help="number of trials")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("run", parents=[common], help="one trial with full trajectory output").set_defaults(func=cmd_run)
    sub.add_parser("verify", parents=[common], help="certificate suite over N trials").set_defaults(func=cmd_verify)
    p = sub.add_parser("sweep", parents=[common], help="rate sweep over T or d")
    p.add_argument("--axis", choices=["T", "d"], default="T")
    p.add_argument("--grid", help="comma-separated axis values")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("wanes", parents=[common], help="resilience estimate")
    p.add_argument("--epsilon", default="theoretical", help="'theoretical', 'inf' or a positive number")
    p.set_defaults(func=cmd_wanes)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
