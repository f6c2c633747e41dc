"""Command-line interface.

Exit codes: 0 success, 1 invalid configuration, 2 infeasible instance,
3 solver nonconvergence / verification failure.
"""

from __future__ import annotations

import argparse
import ast
import dataclasses
import sys

import numpy as np

from . import channel as ch
from . import dataset as dsm
from . import experiment as xp
from . import power as pw

EXIT_OK = 0
EXIT_BAD_CONFIG = 1
EXIT_INFEASIBLE = 2
EXIT_NONCONVERGED = 3


def _load_config(args) -> xp.ExperimentConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = ast.literal_eval(val.strip())
    if args.config:
        return xp.parse_config(args.config, overrides)
    known = {f.name for f in dataclasses.fields(xp.ExperimentConfig)}
    bad = set(overrides) - known
    if bad:
        raise ValueError(f"unknown config keys {sorted(bad)}")
    return xp.ExperimentConfig(**overrides)


def _setup(cfg):
    ds = dsm.generate_dataset(cfg.dataset_seed, cfg.K, cfg.D, cfg.q,
                              cfg.label_noise_std, cfg.ridge_weight)
    return ds, cfg.learning_constants(ds)


def _trace(cfg, args):
    if getattr(args, "trace", None):
        return ch.load_trace(args.trace)
    return ch.draw_channels(np.random.SeedSequence((cfg.channel_seed, 0)),
                            cfg.K, cfg.N, cfg.noise_std)


def cmd_simulate(args) -> int:
    cfg = dataclasses.replace(_load_config(args), policies=(args.policy,))
    result = xp.monte_carlo(cfg)
    for row in result.summary_table():
        print(f"{row['policy']}: final mean gap {row['final_gap']:.6g} "
              f"(se {row['final_gap_se']:.2g}), pred {row['final_pred']:.6g}, "
              f"{row['trials']} trials, {row['diverged']} diverged, "
              f"{row['infeasible']} infeasible")
    if args.out:
        xp.export_comparison(result, args.out, cfg)
        print(f"wrote {args.out}")
    if result.infeasible[args.policy] == cfg.trials:
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    result = xp.compare_policies(cfg)
    for row in result.summary_table():
        print(f"{row['policy']:>18}: final mean gap {row['final_gap']:.6g} "
              f"(se {row['final_gap_se']:.2g}), pred {row['final_pred']:.6g}, "
              f"{row['trials']}/{cfg.trials} trials counted")
    if args.out:
        xp.export_comparison(result, args.out, cfg)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _load_config(args)
    _ds, lc = _setup(cfg)
    trace = _trace(cfg, args)
    policy = "gap-min-unbiased" if args.case == "unbiased" else "gap-min"
    sched, prob = xp.build_power_schedule(cfg, policy, trace, lc)
    print(f"objective {sched.objective:.10g}, mode {sched.mode}, "
          f"converged {sched.converged}")
    for name, val in sched.diagnostics.items():
        print(f"  {name}: {val}")
    if args.out:
        pw.save_schedule(sched, prob, args.out)
        print(f"wrote {args.out}")
    return EXIT_OK if sched.converged else EXIT_NONCONVERGED


def cmd_feasibility(args) -> int:
    cfg = _load_config(args)
    _ds, lc = _setup(cfg)
    trace = _trace(cfg, args)
    from .convergence import CASE_UNBIASED, build_coefficients, build_schedule
    rates = build_schedule(cfg.rate_kind, cfg.rate_params, trace.N,
                           lc.delta, lc.L)
    coeffs = build_coefficients(CASE_UNBIASED, rates, lc, trace.K,
                                cfg.effective_m_b)
    p_ave, p_max = cfg.solver_budgets()
    prob = pw.PowerProblem(trace=trace, coeffs=coeffs, p_max=p_max, p_ave=p_ave)
    rep = pw.check_feasibility(prob)
    print(f"achievable aligned-amplitude level {rep.l_star:.6g} "
          f"(need {trace.K}); feasible: {rep.feasible}")
    return EXIT_OK if rep.feasible else EXIT_INFEASIBLE


def cmd_bound(args) -> int:
    cfg = _load_config(args)
    checkpoints = tuple(int(c) for c in args.checkpoints.split(","))
    reports = xp.validate_bound(cfg, checkpoints=checkpoints)
    ok = True
    for rep in reports:
        print(f"policy {rep.policy}:")
        for flag in rep.hypothesis_flags:
            print(f"  [flag] {flag}")
        for row in rep.rows:
            print(f"  N={row['N']:>4}: empirical {row['empirical']:.6g} "
                  f"(se {row['se']:.2g}), realized bound "
                  f"{row['realized_bound']:.6g}, analytic bound "
                  f"{row['analytic_bound']:.6g}, "
                  f"ok={row['realized_ok'] and row['analytic_ok']}")
        ok = ok and rep.satisfied
    print("bounds dominate the empirical mean gap" if ok
          else "BOUND VIOLATION detected")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _load_config(args)
    rng = np.random.default_rng(args.seed)
    failures = []
    for i in range(args.instances):
        K = int(rng.integers(2, 5))
        N = int(rng.integers(3, 7))
        trace = ch.ChannelTrace(rng.uniform(0.2, 2.0, (K, N)), 0.0)
        from .convergence import (CASE_BIASED, CASE_UNBIASED,
                                  build_coefficients, build_schedule)
        lc = dsm.learning_constants(dsm.generate_dataset(
            cfg.dataset_seed, K, 50, cfg.q, cfg.label_noise_std,
            cfg.ridge_weight))
        rates = build_schedule("fixed", {"eta": 0.05}, N, lc.delta, lc.L)
        p_ave = rng.uniform(1.0, 20.0, K)
        for case in (CASE_BIASED, CASE_UNBIASED):
            coeffs = build_coefficients(case, rates, lc, K, 10)
            prob = pw.PowerProblem(trace=trace, coeffs=coeffs,
                                   p_max=5.0 * p_ave, p_ave=p_ave)
            try:
                sched = pw.solve_power(prob)
            except pw.InfeasibleError:
                continue
            oracle = pw.oracle_projected_gradient(prob)
            scale = max(abs(oracle.objective), 1e-12)
            rel = abs(sched.objective - oracle.objective) / scale
            kkt = pw.kkt_residuals(sched, prob)
            if rel > 1e-4:
                failures.append(f"instance {i} {case}: objective off by {rel:.2e}")
            if kkt.stationarity > 1e-6 or kkt.primal_violation > 1e-6:
                failures.append(f"instance {i} {case}: KKT residuals "
                                f"{kkt.stationarity:.2e}/{kkt.primal_violation:.2e}")
    if failures:
        for f in failures:
            print(f"FAIL {f}")
        return EXIT_NONCONVERGED
    print(f"verified {args.instances} random instances against the oracle")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="airfeel",
        description="Power control and convergence analysis for over-the-air "
                    "federated edge learning")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="path to a key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config field")

    p = sub.add_parser("simulate", help="Monte-Carlo run of one policy")
    common(p)
    p.add_argument("--policy", default="gap-min", choices=xp.POLICIES)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("compare", help="paired multi-policy comparison")
    common(p)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("solve", help="solve one power-control instance")
    common(p)
    p.add_argument("--case", default="biased", choices=["biased", "unbiased"])
    p.add_argument("--trace", help="channel trace file (default: draw one)")
    p.add_argument("--out", help="schedule CSV output path")
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("feasibility", help="report the achievable alignment level")
    common(p)
    p.add_argument("--trace", help="channel trace file (default: draw one)")
    p.set_defaults(fn=cmd_feasibility)

    p = sub.add_parser("bound", help="validate the gap bounds empirically")
    common(p)
    p.add_argument("--checkpoints", default="50,100,200,400")
    p.set_defaults(fn=cmd_bound)

    p = sub.add_parser("verify", help="oracle and KKT spot checks")
    common(p)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except pw.InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
