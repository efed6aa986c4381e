"""Command-line interface.

Subcommands: simulate, montecarlo, compare, certify, dual, casestudy,
and `qcqp bench`.  Delimited outputs (CSV) are written alongside any
requested figures.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import certify as certify_mod
from . import dual as dual_mod
from . import harness
from .gains import build_gains
from .model import load_scenario, validate_scenario

DEFAULT_SCENARIO = os.path.join("scenarios", "case_study.json")


def _load(args):
    cfg = load_scenario(args.scenario)
    if getattr(args, "dt", None):
        from dataclasses import replace
        cfg = replace(cfg, dt=args.dt)
    return validate_scenario(cfg)


def _attack_from_arg(spec: str | None, p: int):
    """--attack 'a1,a2,...,ap@s1;s2' (constant vector on support) or
    'none'."""
    if not spec or spec == "none":
        return harness.no_attack()
    vec_part, _, supp_part = spec.partition("@")
    vector = np.array([float(v) for v in vec_part.split(",")])
    if supp_part:
        support = {int(s) for s in supp_part.split(";")}
    else:
        support = {i + 1 for i in range(p) if vector[i] != 0.0}
    return harness.constant_attack(vector, support)


def _controller_from_arg(args, setup):
    kind = args.controller
    if kind == "full":
        return harness.FullLQGController()
    if kind.startswith("excl"):
        return harness.ExcludingLQGController(int(kind.split("_")[1]))
    if kind == "proposed":
        gammas = _gammas_from_args(args, setup)
        return harness.ProposedController(gammas)
    raise SystemExit(f"unknown controller {kind!r}")


def _gammas_from_args(args, setup):
    if getattr(args, "gammas", None):
        return tuple(float(g) for g in args.gammas.split(","))
    if getattr(args, "certificates", None):
        with open(args.certificates) as fh:
            return tuple(json.load(fh)["gamma"])
    raise SystemExit("the proposed controller needs --gammas or --certificates")


def _write_trace_csv(trace, setup, path):
    sc = setup.scenario
    n, m, p, q = sc.n, sc.m, sc.p, sc.q
    header = (["t"] + [f"x{i+1}" for i in range(n)]
              + [f"u{i+1}" for i in range(m)]
              + [f"a{i+1}" for i in range(p)]
              + [f"xhat{i+1}" for i in range(n)])
    for j in range(q):
        header += [f"xhat_a{j}_{i+1}" for i in range(n)]
    for pair in setup.pair_keys:
        header += [f"xhat_a{pair[0]}{pair[1]}_{i+1}" for i in range(n)]
    header += ["surviving_set", "running_cost"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(trace.x.shape[0]):
            row = ([trace.times[k]] + list(trace.x[k]) + list(trace.u[k])
                   + list(trace.a[k]) + list(trace.xhat_full[k]))
            for j in range(q):
                row += list(trace.xhat_pattern[k, j])
            for pair in setup.pair_keys:
                row += list(trace.xhat_pair[pair][k])
            surv = trace.surviving[k]
            row.append(";".join(str(i) for i in sorted(surv))
                       if surv is not None else "")
            row.append(trace.running_cost[k])
            w.writerow(row)


def _write_gains_csv(gains, path):
    tr = gains.tracking
    steps = tr.steps
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        n = tr.P.shape[1]
        m = tr.K.shape[1]
        header = ["t"]
        header += [f"P{i+1}{j+1}" for i in range(n) for j in range(n)]
        header += [f"K{i+1}{j+1}" for i in range(m) for j in range(n)]
        header += [f"s{i+1}" for i in range(n)]
        w.writerow(header)
        for k in range(steps + 1):
            w.writerow([k * tr.dt] + list(tr.P[k].ravel())
                       + list(tr.K[k].ravel()) + list(tr.s[k]))


def _summary(stats: harness.MonteCarloStats) -> dict:
    return {"runs": stats.runs, "mean_cost": stats.mean_cost,
            "cost_ci": stats.cost_ci,
            "violation_freq": stats.violation_freq,
            "violation_ci": stats.violation_ci,
            "goal_freq": stats.goal_freq, "goal_ci": stats.goal_ci}


def _emit(data: dict, args):
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "summary.json")
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
    print(json.dumps(data, indent=2))


def cmd_simulate(args):
    sc = _load(args)
    setup = harness.SimSetup.build(sc)
    ctrl = _controller_from_arg(args, setup)
    adv = _attack_from_arg(args.attack, sc.p)
    trace, met = harness.simulate(sc, ctrl, adv, args.seed, setup=setup)
    os.makedirs(args.out, exist_ok=True)
    _write_trace_csv(trace, setup, os.path.join(args.out, "trace.csv"))
    if args.dump_gains:
        _write_gains_csv(setup.gains, os.path.join(args.out, "gains.csv"))
    _emit({"total_cost": met.total_cost,
           "safety_violated": met.safety_violated,
           "first_violation_time": met.first_violation_time,
           "reached_goal": met.reached_goal,
           "rms_tracking_error": met.rms_tracking_error}, args)


def cmd_montecarlo(args):
    sc = _load(args)
    setup = harness.SimSetup.build(sc)
    ctrl = _controller_from_arg(args, setup)
    adv = _attack_from_arg(args.attack, sc.p)
    stats = harness.monte_carlo(sc, ctrl, adv, args.runs, args.seed,
                                setup=setup, workers=args.workers)
    _emit(_summary(stats), args)


def cmd_compare(args):
    sc = _load(args)
    setup = harness.SimSetup.build(sc)
    gammas = _gammas_from_args(args, setup)
    ctrls = harness.case_study_controllers(setup, gammas)
    adv = _attack_from_arg(args.attack, sc.p)
    cmp_res = harness.compare_controllers(sc, ctrls, adv, args.runs,
                                          args.seed, setup=setup)
    os.makedirs(args.out, exist_ok=True)
    _write_comparison_csv(cmp_res, setup, args.out, prefix="compare")
    if args.plot:
        from . import plots
        plots.render_tracking_error(
            cmp_res, sc.times, os.path.join(args.out, "tracking_error.svg"))
        plots.render_trajectories(
            cmp_res, sc, os.path.join(args.out, "trajectories.svg"))
        plots.render_log_cost(
            cmp_res, sc.times, os.path.join(args.out, "log_cost.svg"))
    _emit({name: _summary(cmp_res.stats[name]) for name in cmp_res.names}, args)


def _write_comparison_csv(cmp_res, setup, out_dir, prefix):
    times = setup.scenario.times
    path = os.path.join(out_dir, f"{prefix}_curves.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["t"]
        for nm in cmp_res.names:
            header += [f"err_{nm}", f"logcost_{nm}"]
        w.writerow(header)
        for k in range(len(times)):
            row = [times[k]]
            for nm in cmp_res.names:
                row += [cmp_res.tracking_error_curves[nm][k],
                        cmp_res.log_cost_curves[nm][k]]
            w.writerow(row)


def cmd_certify(args):
    sc = _load(args)
    gains = build_gains(sc)
    sel = certify_mod.gamma_selection(
        sc, args.eps_s, args.eps_r, args.iter_times, gains=gains,
        gamma0=args.gamma0, rho=args.rho)
    if sel is None:
        _emit({"status": "failed",
               "detail": "no configuration satisfied the combined bound"},
              args)
        sys.exit(1)
    bundle = {
        "status": "ok",
        "gamma": list(sel.gammas),
        "gamma_min": sel.gamma_min,
        "eta": sel.bounds.eta.tolist(),
        "p1": sel.bounds.p1.tolist(),
        "p2_lower": sel.bounds.p2_lower.tolist(),
        "p0_lower": sel.bounds.p0_lower.tolist(),
        "kbar": sel.bounds.kbar,
        "lambda_stars": sel.bounds.lambda_stars.tolist(),
        "eps_s": args.eps_s, "eps_r": args.eps_r,
    }
    grams = {}
    for i, search in enumerate(sel.searches):
        if search is None:
            continue
        for kind, cert in (("safety", search.cert_s),
                           ("reachability", search.cert_r)):
            grams[f"pattern{i}_{kind}"] = {
                name: M.tolist() for name, M in cert.gram_matrices.items()}
    bundle["gram_matrices"] = grams
    if args.mc_runs > 0:
        mc = {}
        for i in range(sc.q):
            mc[f"pattern{i}"] = certify_mod.mc_verify(
                sc, i, sel.gammas[i], runs=args.mc_runs, seed=args.seed,
                gains=gains)
        bundle["mc_verify"] = mc
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "certificates.json")
    with open(path, "w") as fh:
        json.dump(bundle, fh, indent=1)
    brief = {k: bundle[k] for k in ("status", "gamma", "gamma_min", "p0_lower")}
    print(json.dumps(brief, indent=2))
    print(f"certificate bundle written to {path}")


def cmd_dual(args):
    sc = _load(args)
    if args.lambda_grid:
        grid = [float(x) for x in args.lambda_grid.split(",")]
    else:
        grid = list(dual_mod.default_lambda_grid())
    gains = build_gains(sc)
    setup = harness.SimSetup.build(sc, gains)
    res = dual_mod.lambda_sweep(sc, grid, args.runs, args.seed,
                                gamma1=args.gamma1, setup=setup)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "lambda_sweep.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "v3_mean", "v3_ci", "violation_sup"])
        for r in res.rows:
            w.writerow([r.lam, r.v3_mean, r.v3_ci, r.violation_sup])
    print(f"sweep written to {path}; best lambda: {res.best_lam}")


def cmd_casestudy(args):
    sc = _load(args)
    gains = build_gains(sc)
    setup = harness.SimSetup.build(sc, gains)
    if args.certificates:
        with open(args.certificates) as fh:
            gammas = tuple(json.load(fh)["gamma"])
    else:
        sel = certify_mod.gamma_selection(sc, sc.cfg.eps_s, sc.cfg.eps_r,
                                          args.iter_times, gains=gains)
        if sel is None:
            raise SystemExit("gamma selection failed on the case study")
        gammas = sel.gammas
    ctrls = harness.case_study_controllers(setup, gammas)
    attack = harness.constant_attack(
        np.array([0.0, 0.0, 0.0, 1.0]), {4})
    free_cmp = harness.compare_controllers(sc, ctrls, harness.no_attack(),
                                           args.runs, args.seed, setup=setup)
    atk_cmp = harness.compare_controllers(sc, ctrls, attack, args.runs,
                                          args.seed + 10_000, setup=setup)
    os.makedirs(args.out, exist_ok=True)
    _write_comparison_csv(free_cmp, setup, args.out, prefix="fig2_attack_free")
    _write_comparison_csv(atk_cmp, setup, args.out, prefix="fig34_attacked")
    from . import plots
    plots.render_case_study(free_cmp, atk_cmp, sc, args.out, fmt=args.format_fig)
    summary = {"gammas": list(gammas),
               "attack_free": {nm: _summary(free_cmp.stats[nm])
                               for nm in free_cmp.names},
               "attacked": {nm: _summary(atk_cmp.stats[nm])
                            for nm in atk_cmp.names}}
    _emit(summary, args)


def cmd_qcqp(args):
    if args.qcqp_cmd != "bench":
        raise SystemExit("usage: resilient-lqg qcqp bench")
    from . import qcqp as qcqp_mod
    rng = np.random.default_rng(args.seed)
    worst_kkt = 0.0
    worst_feas = 0.0
    worst_gap = 0.0
    for _ in range(args.runs):
        m = int(rng.integers(2, 5))
        qn = int(rng.integers(1, 5))
        Rm = rng.standard_normal((m, m))
        Rm = Rm @ Rm.T + 0.1 * np.eye(m)
        lin = 3.0 * rng.standard_normal(m)
        witness = rng.standard_normal(m)
        balls = []
        for i in range(qn):
            r = rng.uniform(0.2, 2.0)
            d = rng.standard_normal(m)
            d /= np.linalg.norm(d)
            balls.append(qcqp_mod.BallConstraint(
                witness + rng.uniform(0, 0.9 * r) * d, r, i))
        prob = qcqp_mod.QcqpProblem(R=Rm, lin=lin, balls=tuple(balls))
        sol = qcqp_mod.solve(prob)
        worst_kkt = max(worst_kkt, sol.kkt_residual)
        worst_feas = max(worst_feas, sol.feasibility_violation)
        best = _sampling_oracle(prob, rng)
        gap = (best - prob.objective(sol.u)) / (1.0 + abs(best))
        worst_gap = max(worst_gap, -min(gap, 0.0))
    print(f"instances: {args.runs}")
    print(f"max KKT residual:          {worst_kkt:.3e}")
    print(f"max feasibility violation: {worst_feas:.3e}")
    print(f"max oracle objective gap:  {worst_gap:.3e}")


def _sampling_oracle(problem, rng, rounds: int = 12, batch: int = 4000):
    """Derivative-free shrinking-batch sampler over the ball intersection."""
    from . import qcqp as qcqp_mod
    feas = qcqp_mod.check_feasible(problem.balls)
    center = feas.witness
    radius = max(b.radius for b in problem.balls) * 2.0
    best_u = center
    best = problem.objective(center)
    m = problem.m
    for _ in range(rounds):
        pts = center + radius * rng.standard_normal((batch, m))
        ok = np.ones(batch, dtype=bool)
        for b in problem.balls:
            ok &= np.linalg.norm(pts - b.center, axis=1) <= b.radius
        if np.any(ok):
            pts = pts[ok]
            vals = (np.einsum("ki,ij,kj->k", pts, problem.R, pts)
                    + pts @ problem.lin)
            i = int(np.argmin(vals))
            if vals[i] < best:
                best = float(vals[i])
                best_u = pts[i]
                center = pts[i]
        radius *= 0.5
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="resilient-lqg",
        description="Attack-resilient LQG tracking: simulation, "
                    "certification, and case-study reproduction")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, runs_default=200):
        p.add_argument("--scenario", default=DEFAULT_SCENARIO)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--runs", type=int, default=runs_default)
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default="out")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--plot", action="store_true")

    p = sub.add_parser("simulate", help="single closed-loop run")
    common(p, 1)
    p.add_argument("--controller", default="proposed")
    p.add_argument("--gammas", default=None)
    p.add_argument("--certificates", default=None)
    p.add_argument("--attack", default="none")
    p.add_argument("--dump-gains", action="store_true")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("montecarlo", help="Monte Carlo batch")
    common(p)
    p.add_argument("--controller", default="proposed")
    p.add_argument("--gammas", default=None)
    p.add_argument("--certificates", default=None)
    p.add_argument("--attack", default="none")
    p.set_defaults(fn=cmd_montecarlo)

    p = sub.add_parser("compare", help="four-controller comparison")
    common(p, 50)
    p.add_argument("--gammas", default=None)
    p.add_argument("--certificates", default=None)
    p.add_argument("--attack", default="none")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("certify", help="barrier certification and "
                                       "radius selection")
    common(p, 0)
    p.add_argument("--eps-s", type=float, default=0.3)
    p.add_argument("--eps-r", type=float, default=0.3)
    p.add_argument("--gamma0", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--iter-times", type=int, default=6)
    p.add_argument("--mc-runs", type=int, default=0)
    p.set_defaults(fn=cmd_certify)

    p = sub.add_parser("dual", help="single-pattern lambda sweep")
    common(p, 20)
    p.add_argument("--lambda-grid", default=None)
    p.add_argument("--gamma1", type=float, default=0.2)
    p.set_defaults(fn=cmd_dual)

    p = sub.add_parser("casestudy", help="regenerate the case-study "
                                         "figures and tables")
    common(p, 50)
    p.add_argument("--certificates", default=None)
    p.add_argument("--iter-times", type=int, default=6)
    p.add_argument("--format-fig", default="svg")
    p.set_defaults(fn=cmd_casestudy)

    p = sub.add_parser("qcqp", help="QCQP solver utilities")
    p.add_argument("qcqp_cmd", choices=("bench",))
    p.add_argument("--runs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_qcqp)

    args = ap.parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
