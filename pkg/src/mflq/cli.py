"""Command-line interface.

Subcommands
-----------
riccati       solve the three Riccati equations, write traces and gains
simulate      Monte Carlo population run under one law, write cost tables
compare       cost ordering of both laws across population sizes
convergence   per-agent cost gap against the exact limit value as N grows
verify        internal consistency checks (exit 1 on any failure)
paper-example full benchmark battery with CSV/JSON artifacts

Problems come from a JSON file (--problem path) or the built-in
benchmark (--problem builtin:paper, the default).

Exit codes: 0 success; 1 verification failure; 2 invalid problem or
arguments; 3 singular or insufficiently regular gain operator; 4 state
or Riccati blowup. Artifacts are deterministic: no timestamps, floats at
17 significant digits, and identical bytes under any MFLQ_THREADS.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .analysis import (
    benchmark_report,
    convergence_study,
    ordering_check,
    ordering_json,
    perturbation_optimality,
    write_convergence_csv,
)
from .benchmark import benchmark_problem
from .errors import Blowup, GridMismatch, RegularityError, SingularGain, ValidationError
from .model import load_problem, with_gammas, without_bar_coefficients
from .riccati import EPS_REG_DEFAULT, regularity, solve_re1, solve_re2, solve_re3, write_trace_csv
from .simulate import (
    SDE_STEPS_DEFAULT,
    NoiseBundle,
    agent_mean,
    estimate_cost_limit,
    mc_value,
    population_costs,
    simulate_population,
    write_costs_csv,
    write_trajectory_csv,
)
from .strategy import equivalence_check, synthesize_mc_mt, synthesize_mg, write_gains_csv

BUILTIN = "builtin:paper"


def _load(args):
    """Problem from --problem, with --nt overriding the grid size."""
    name = args.problem
    nt = getattr(args, "nt", None)
    if name == BUILTIN:
        return benchmark_problem(n_t=nt if nt else 1000)
    spec = load_problem(name)
    if nt:
        spec = replace(spec, dims=replace(spec.dims, n_t=nt))
    return spec


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _solve_all(spec, eps_reg):
    p1 = solve_re1(spec, eps_reg=eps_reg, certify=False)
    p2 = solve_re2(spec, p1=p1, eps_reg=eps_reg, certify=False)
    p3 = solve_re3(spec, p1=p1, eps_reg=eps_reg, certify=False)
    return p1, p2, p3


def _require_regular(sols, eps_reg):
    for sol in sols:
        rep = regularity(sol, eps_reg=eps_reg)
        if not rep.passed:
            raise RegularityError(sol.tag, rep.global_min, eps_reg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_riccati(args) -> int:
    spec = _load(args)
    out = _outdir(args)
    p1, p2, p3 = _solve_all(spec, args.eps_reg)
    _require_regular((p1, p2, p3), args.eps_reg)
    law_mt = synthesize_mc_mt(spec, p1, p2)
    law_mg = synthesize_mg(spec, p1, p3)
    for sol, name in ((p1, "re1_trace.csv"), (p2, "re2_trace.csv"), (p3, "re3_trace.csv")):
        write_trace_csv(sol, os.path.join(out, name))
    write_gains_csv(law_mt, os.path.join(out, "gains_mc_mt.csv"))
    write_gains_csv(law_mg, os.path.join(out, "gains_mg.csv"))
    summary = {
        sol.tag: {"global_min_eig": float(np.min(sol.min_eig)),
                  "regular": bool(np.min(sol.min_eig) >= args.eps_reg)}
        for sol in (p1, p2, p3)
    }
    with open(os.path.join(out, "regularity.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump({"eps_reg": args.eps_reg, "equations": summary}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote Riccati traces, gains and regularity.json to {out}")
    return 0


def _cmd_simulate(args) -> int:
    spec = _load(args)
    out = _outdir(args)
    N = args.N[0] if args.N else 8
    p1, p2, p3 = _solve_all(spec, args.eps_reg)
    _require_regular((p1, p2, p3), args.eps_reg)
    if args.law == "mc-mt":
        law = synthesize_mc_mt(spec, p1, p2)
    else:
        law = synthesize_mg(spec, p1, p3)
    noise = NoiseBundle(seed=args.seed, M=args.M, N=N, sde_steps=args.sde_steps)
    per_agent = population_costs(spec, law, noise)
    per_rep = agent_mean(per_agent)
    social = np.sort(per_agent, axis=1).sum(axis=1)

    def stats(samples):
        return float(np.mean(samples)), float(np.std(samples, ddof=1) / np.sqrt(len(samples)))

    if args.law == "mc-mt":
        rows = [("MT_social", N, args.M, *stats(social)),
                ("MT_per_agent", N, args.M, *stats(per_rep))]
    else:
        rows = [("MG_individual", N, args.M, *stats(per_rep))]
    write_costs_csv(os.path.join(out, "costs.csv"), rows)
    if args.trajectory:
        traj = simulate_population(spec, law, noise, replication=0)
        write_trajectory_csv(traj, os.path.join(out, "trajectory.csv"))
    print(f"wrote costs.csv for law={args.law}, N={N}, M={args.M} to {out}")
    return 0


def _cmd_compare(args) -> int:
    spec = _load(args)
    out = _outdir(args)
    N_list = args.N or [4, 16, 64, 256]
    p1, p2, p3 = _solve_all(spec, args.eps_reg)
    _require_regular((p1, p2, p3), args.eps_reg)
    law_mt = synthesize_mc_mt(spec, p1, p2)
    law_mg = synthesize_mg(spec, p1, p3)
    report = ordering_check(spec, law_mt, law_mg, p2, N_list, args.M, args.seed,
                            sde_steps=args.sde_steps)
    rows = [("MC_limit", 0, 0, report.value, 0.0)]
    for e in report.entries:
        rows.append(("MT_per_agent", e.N, e.M, e.mt_mean, e.mt_stderr))
        rows.append(("MG_individual", e.N, e.M, e.mg_mean, e.mg_stderr))
    write_costs_csv(os.path.join(out, "costs_vs_N.csv"), rows)
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump({"ordering": ordering_json(report)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    verdict = "holds" if report.chain_holds else "VIOLATED"
    print(f"cost ordering {verdict}; value={report.value:.6g}; wrote artifacts to {out}")
    return 0


def _cmd_convergence(args) -> int:
    spec = _load(args)
    out = _outdir(args)
    N_list = args.N or [4, 16, 64, 256]
    p1, p2, _ = _solve_all(spec, args.eps_reg)
    _require_regular((p1, p2), args.eps_reg)
    law = synthesize_mc_mt(spec, p1, p2)
    report = convergence_study(spec, law, p2, N_list, args.M, args.seed,
                               sde_steps=args.sde_steps)
    write_convergence_csv(report, os.path.join(out, "convergence.csv"))
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump({
            "reference": report.reference,
            "N_list": list(report.N_list),
            "M": report.M,
            "gaps": [float(g) for g in report.gaps],
            "slope": report.slope,
            "intercept": report.intercept,
            "residual": report.residual,
            "decreasing": report.decreasing,
            "noise_floor": report.noise_floor,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"slope={report.slope:.3f}, decreasing={report.decreasing}; "
          f"wrote convergence.csv to {out}")
    return 0


def _cmd_verify(args) -> int:
    spec = _load(args)
    eps_reg = args.eps_reg
    failures = 0

    def check(name, ok, detail):
        nonlocal failures
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        if not ok:
            failures += 1

    n = spec.n
    zero = np.zeros((n, n))

    # 1. with no couplings, the three equations must coincide
    collapsed = with_gammas(without_bar_coefficients(spec), zero, zero)
    c1 = solve_re1(collapsed, eps_reg=eps_reg, certify=False)
    c2 = solve_re2(collapsed, p1=c1, eps_reg=eps_reg, certify=False)
    c3 = solve_re3(collapsed, p1=c1, eps_reg=eps_reg, certify=False)
    scale = 1.0 + float(np.max(np.abs(c1.P)))
    rel = max(float(np.max(np.abs(c1.P - c2.P))),
              float(np.max(np.abs(c1.P - c3.P)))) / scale
    check("collapse identity", rel <= 1e-10, f"max relative diff {rel:.3e} (tol 1e-10)")

    # 2. with no couplings and full tracking, both laws must coincide
    eye = np.eye(n)
    special = with_gammas(without_bar_coefficients(spec), eye, eye)
    s1 = solve_re1(special, eps_reg=eps_reg, certify=False)
    s2 = solve_re2(special, p1=s1, eps_reg=eps_reg, certify=False)
    s3 = solve_re3(special, p1=s1, eps_reg=eps_reg, certify=False)
    eq = equivalence_check(special,
                           synthesize_mc_mt(special, s1, s2),
                           synthesize_mg(special, s1, s3), tol=1e-8)
    check("law equivalence in the decoupled tracking regime", eq.equivalent,
          f"max gain diff {max(eq.max_diff_mean, eq.max_diff_dev):.3e} (tol 1e-8)")

    # 3. the simulated limit cost must match the exact value
    p1, p2, p3 = _solve_all(spec, eps_reg)
    _require_regular((p1, p2, p3), eps_reg)
    law = synthesize_mc_mt(spec, p1, p2)
    value = mc_value(p2, spec.x0)
    est = estimate_cost_limit(spec, law, args.M, args.seed, sde_steps=args.sde_steps)
    tol = 3 * est.stderr + 0.02 * abs(value)
    check("limit value identity", abs(est.mean - value) <= tol,
          f"exact {value:.6g}, estimate {est.mean:.6g} +- {est.stderr:.2g}")

    # 4. the control law must pass the first-order optimality test
    rep = perturbation_optimality(spec, law, args.M, args.seed,
                                  sde_steps=args.sde_steps)
    worst = float(np.max(np.abs(rep.derivatives) - rep.tolerances))
    check("first-order optimality of the control law", rep.passed,
          f"worst derivative excess {worst:.3e}")

    if failures:
        print(f"{failures} verification check(s) failed", file=sys.stderr)
        return 1
    print("all verification checks passed")
    return 0


def _cmd_paper_example(args) -> int:
    out = _outdir(args)
    report = benchmark_report(
        out,
        N_list=args.N or [4, 16, 64, 256],
        M_orderings=args.M,
        M_value=args.M_value,
        seed=args.seed,
        n_t=args.nt or 1000,
        sde_steps=args.sde_steps,
    )
    weights_ok = all(v["ok"] for v in report["weights"].values())
    print(f"weight eigenvalues: {'ok' if weights_ok else 'MISMATCH'}")
    print(f"limit value {report['value']['exact']:.6g}, "
          f"estimate {report['value']['estimate']:.6g} "
          f"({'ok' if report['value']['ok'] else 'MISMATCH'})")
    print(f"cost ordering: {'holds' if report['ordering']['chain_holds'] else 'VIOLATED'}; "
          f"mt-gap slope {report['ordering']['slope']:.3f}")
    print(f"special regime: laws {'coincide' if report['equivalence_special']['ok'] else 'DIFFER'}")
    print(f"wrote r_eigs.csv, costs_vs_N.csv, costs_vs_N_special.csv, report.json to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mflq",
        description="Linear-quadratic mean-field control, team and game solver.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--problem", default=BUILTIN,
                        help=f"problem JSON file or '{BUILTIN}' (default)")
    common.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    common.add_argument("--nt", type=int, default=None,
                        help="Riccati grid steps (default: problem's own)")
    common.add_argument("--sde-steps", type=int, default=SDE_STEPS_DEFAULT,
                        help="Euler steps per unit time (default %(default)s)")
    common.add_argument("--eps-reg", type=float, default=EPS_REG_DEFAULT,
                        help="regularity threshold for gain operators (default %(default)s)")

    outp = argparse.ArgumentParser(add_help=False)
    outp.add_argument("--out", default="mflq_out",
                      help="output directory (default %(default)s)")

    p = sub.add_parser("riccati", parents=[common, outp],
                       help="solve the Riccati equations and write traces and gains")
    p.set_defaults(func=_cmd_riccati)

    p = sub.add_parser("simulate", parents=[common, outp],
                       help="Monte Carlo population simulation under one law")
    p.add_argument("--law", choices=["mc-mt", "mg"], required=True,
                   help="feedback law: control/team or game")
    p.add_argument("--N", type=int, action="append",
                   help="population size (default 8)")
    p.add_argument("--M", type=int, default=100,
                   help="replications (default %(default)s)")
    p.add_argument("--trajectory", action="store_true",
                   help="also write the full paths of replication 0")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("compare", parents=[common, outp],
                       help="cost ordering of both laws across population sizes")
    p.add_argument("--N", type=int, action="append",
                   help="population sizes, repeatable (default 4 16 64 256)")
    p.add_argument("--M", type=int, default=500,
                   help="replications per size (default %(default)s)")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("convergence", parents=[common, outp],
                       help="per-agent cost gap against the exact limit value")
    p.add_argument("--N", type=int, action="append",
                   help="population sizes, repeatable (default 4 16 64 256)")
    p.add_argument("--M", type=int, default=500,
                   help="replications per size (default %(default)s)")
    p.set_defaults(func=_cmd_convergence)

    p = sub.add_parser("verify", parents=[common],
                       help="internal consistency checks; exit 1 on failure")
    p.add_argument("--M", type=int, default=4000,
                   help="replications for the Monte Carlo checks (default %(default)s)")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("paper-example", parents=[common, outp],
                       help="full benchmark battery with CSV/JSON artifacts")
    p.add_argument("--N", type=int, action="append",
                   help="population sizes, repeatable (default 4 16 64 256)")
    p.add_argument("--M", type=int, default=500,
                   help="replications per size (default %(default)s)")
    p.add_argument("--M-value", dest="M_value", type=int, default=10_000,
                   help="replications for the value check (default %(default)s)")
    p.set_defaults(func=_cmd_paper_example)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, GridMismatch) as exc:
        print(f"error: invalid problem: {exc}", file=sys.stderr)
        return 2
    except (json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: cannot read problem: {exc}", file=sys.stderr)
        return 2
    except (SingularGain, RegularityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Blowup as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
