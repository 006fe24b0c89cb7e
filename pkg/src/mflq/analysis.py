"""Statistical studies of the population against its mean-field limit.

Three studies, each a thin experiment around the simulator:

* `convergence_study` — how fast the per-agent population cost under the
  limit-control law approaches the exact limit value as N grows.
* `ordering_check` — the cost ordering between the three solution
  concepts: per-agent social cost <= limit-control value <= individual
  cost under the game law, up to O(N^{-1/2}) corrections whose constant
  is fitted from the measured social-side gaps.
* `perturbation_optimality` — a first-order optimality test of a
  feedback law for the limit-control problem: central-difference
  directional derivatives of the cost along random control perturbations
  must vanish within Monte Carlo error plus a discretization allowance.

`benchmark_report` runs the full battery on the built-in benchmark
problem and writes deterministic CSV/JSON artifacts.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .benchmark import WEIGHT_EIGENVALUES, benchmark_problem, special_variant
from .model import ProblemSpec
from .riccati import RiccatiSolution, solve_re1, solve_re2, solve_re3
from .simulate import (
    SDE_STEPS_DEFAULT,
    CostEstimate,
    NoiseBundle,
    agent_mean,
    estimate_cost_limit,
    limit_costs,
    mc_value,
    population_costs,
    sde_step_count,
    write_costs_csv,
)
from .strategy import FeedbackLaw, equivalence_check, synthesize_mc_mt, synthesize_mg

__all__ = [
    "ConvergenceReport",
    "OrderingEntry",
    "OrderingReport",
    "PerturbationReport",
    "convergence_study",
    "ordering_check",
    "ordering_json",
    "perturbation_optimality",
    "perturbation_directions",
    "benchmark_report",
    "write_r_eigs_csv",
    "write_convergence_csv",
]

_FMT = "%.17g"


def _fit_loglog(N_list, gaps) -> tuple[float, float, float]:
    """Least-squares line of log gap against log N.

    Returns (slope, intercept, residual) where residual is the root mean
    square misfit of the line in log space.
    """
    logN = np.log(np.asarray(N_list, dtype=float))
    logg = np.log(np.maximum(np.asarray(gaps, dtype=float), 1e-300))
    slope, intercept = np.polyfit(logN, logg, 1)
    residual = float(np.sqrt(np.mean((logg - (slope * logN + intercept)) ** 2)))
    return float(slope), float(intercept), residual


def _fit_slope(N_list, gaps) -> float:
    """Least-squares slope of log gap against log N."""
    return _fit_loglog(N_list, gaps)[0]


# ---------------------------------------------------------------------------
# convergence of the per-agent social cost to the limit value
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceReport:
    """Gap between per-agent population cost and the exact limit value."""

    N_list: tuple
    M: int
    reference: float          # exact limit-control value
    means: np.ndarray         # per-agent cost mean, one per N
    stderrs: np.ndarray
    gaps: np.ndarray          # |mean - reference|
    slope: float              # log-log line fit of gap against N
    intercept: float
    residual: float           # rms misfit of the log-log line
    decreasing: bool
    noise_floor: bool         # some gap is within one stderr of zero


def convergence_study(spec: ProblemSpec, law: FeedbackLaw, p2: RiccatiSolution,
                      N_list=(4, 16, 64, 256), M: int = 500, seed: int = 0,
                      *, sde_steps: int = SDE_STEPS_DEFAULT,
                      threads: int | None = None) -> ConvergenceReport:
    """Measure the per-agent cost gap for each N under a common seed.

    Agent noise streams coincide across the different N (common random
    numbers), so the gap sequence is smoother than independent runs.
    """
    N_list = tuple(int(N) for N in N_list)
    value = mc_value(p2, spec.x0)
    means = np.empty(len(N_list))
    stderrs = np.empty(len(N_list))
    for i, N in enumerate(N_list):
        noise = NoiseBundle(seed=seed, M=M, N=N, sde_steps=sde_steps)
        per_agent = population_costs(spec, law, noise, threads=threads)
        samples = agent_mean(per_agent)
        means[i] = np.mean(samples)
        stderrs[i] = np.std(samples, ddof=1) / np.sqrt(M)
    gaps = np.abs(means - value)
    slope, intercept, residual = _fit_loglog(N_list, gaps)
    return ConvergenceReport(
        N_list=N_list,
        M=M,
        reference=value,
        means=means,
        stderrs=stderrs,
        gaps=gaps,
        slope=slope,
        intercept=intercept,
        residual=residual,
        decreasing=bool(np.all(np.diff(gaps) < 0)),
        noise_floor=bool(np.any(gaps <= stderrs)),
    )


def write_convergence_csv(report: ConvergenceReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("N,M,mean,stderr,gap\n")
        for N, mean, se, gap in zip(report.N_list, report.means, report.stderrs, report.gaps):
            fh.write(f"{N},{report.M},{_FMT % mean},{_FMT % se},{_FMT % gap}\n")


# ---------------------------------------------------------------------------
# ordering of the three solution concepts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OrderingEntry:
    """Paired cost measurements for one population size."""

    N: int
    M: int
    mt_mean: float            # per-agent social cost under the control law
    mt_stderr: float
    mg_mean: float            # individual cost under the game law
    mg_stderr: float
    diff_mean: float          # mg - mt, paired per replication
    diff_stderr: float
    chain_lower_ok: bool      # mt - c/sqrt(N) <= value  (within 3 stderr)
    chain_upper_ok: bool      # value <= mg + c/sqrt(N)  (within 3 stderr)
    mg_gap_strict: bool       # mg exceeds mt by more than 3 paired stderr
    closeness_ok: bool        # |mg - mt| <= 3 paired stderr + c/sqrt(N)


@dataclass(frozen=True)
class OrderingReport:
    """Cost ordering across population sizes under common random numbers."""

    value: float              # exact limit-control value
    c: float                  # fitted O(N^{-1/2}) constant, from the mt side
    entries: tuple
    chain_holds: bool
    mg_all_strict: bool
    all_close: bool
    slope: float              # log-log slope of the mt-side gaps


def ordering_check(spec: ProblemSpec, law_mc_mt: FeedbackLaw, law_mg: FeedbackLaw,
                   p2: RiccatiSolution, N_list=(4, 16, 64, 256), M: int = 500,
                   seed: int = 0, *, sde_steps: int = SDE_STEPS_DEFAULT,
                   threads: int | None = None) -> OrderingReport:
    """Compare both laws on the same populations for each N.

    Both laws see identical noise (per replication and agent), so the
    mg - mt difference is a low-variance paired statistic. Individual
    cost under the game law is estimated by the agent-averaged cost,
    which has the same mean by exchangeability.
    """
    N_list = tuple(int(N) for N in N_list)
    value = mc_value(p2, spec.x0)
    raw = []
    for N in N_list:
        noise = NoiseBundle(seed=seed, M=M, N=N, sde_steps=sde_steps)
        mt_samples = agent_mean(population_costs(spec, law_mc_mt, noise, threads=threads))
        mg_samples = agent_mean(population_costs(spec, law_mg, noise, threads=threads))
        diff = mg_samples - mt_samples
        raw.append((
            float(np.mean(mt_samples)),
            float(np.std(mt_samples, ddof=1) / np.sqrt(M)),
            float(np.mean(mg_samples)),
            float(np.std(mg_samples, ddof=1) / np.sqrt(M)),
            float(np.mean(diff)),
            float(np.std(diff, ddof=1) / np.sqrt(M)),
        ))

    mt_gaps = [abs(r[0] - value) for r in raw]
    c = max(np.sqrt(N) * gap for N, gap in zip(N_list, mt_gaps))

    entries = []
    for N, (mt_m, mt_se, mg_m, mg_se, d_m, d_se) in zip(N_list, raw):
        slack = c / np.sqrt(N)
        entries.append(OrderingEntry(
            N=N, M=M,
            mt_mean=mt_m, mt_stderr=mt_se,
            mg_mean=mg_m, mg_stderr=mg_se,
            diff_mean=d_m, diff_stderr=d_se,
            chain_lower_ok=bool(mt_m - slack <= value + 3 * mt_se),
            chain_upper_ok=bool(value <= mg_m + slack + 3 * mg_se),
            mg_gap_strict=bool(d_m > 3 * d_se),
            closeness_ok=bool(abs(d_m) <= 3 * d_se + slack),
        ))
    entries = tuple(entries)
    return OrderingReport(
        value=value,
        c=float(c),
        entries=entries,
        chain_holds=bool(all(e.chain_lower_ok and e.chain_upper_ok for e in entries)),
        mg_all_strict=bool(all(e.mg_gap_strict for e in entries)),
        all_close=bool(all(e.closeness_ok for e in entries)),
        slope=_fit_slope(N_list, mt_gaps),
    )


# ---------------------------------------------------------------------------
# first-order optimality of a law for the limit-control problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationReport:
    """Directional-derivative test of limit-control optimality."""

    eps: float
    M: int
    agents: int                    # conditionally independent agents averaged per replication
    baseline: CostEstimate
    channels: tuple[str, ...]      # "mean" (deterministic shift) or "dev" (deviation-proportional)
    derivatives: np.ndarray        # one central-difference estimate per direction
    derivative_stderrs: np.ndarray # after control-variate adjustment
    tolerances: np.ndarray         # 3 stderr + discretization allowance
    convexity_ok: bool             # perturbed costs never drop below baseline
    passed: bool


def perturbation_directions(n_directions: int, n_steps: int, m: int,
                            seed: int, n_segments: int | None = None) -> np.ndarray:
    """Random piecewise-constant control directions, sup-norm one.

    Direction j is constant on equal time segments with Gaussian segment
    values, scaled so max_t |v(t)|_2 = 1. By default the segment count
    doubles with the direction index (1, 2, 4, ..., capped at 32), so a
    small family is guaranteed to probe every time scale from constant
    shifts down to fast sign changes; a gradient that integrates to zero
    against one resolution cannot hide from all of them. Passing
    `n_segments` forces that fixed resolution for every direction.
    Shape (n_directions, n_steps, m); deterministic in the seed.
    """
    key = np.array([np.uint64(seed), np.uint64(1 << 48)], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    out = np.empty((n_directions, n_steps, m))
    for j in range(n_directions):
        n_seg = min(2 ** j, 32) if n_segments is None else n_segments
        seg = rng.standard_normal((n_seg, m))
        seg /= np.linalg.norm(seg, axis=1).max()
        idx = np.minimum((n_seg * np.arange(n_steps)) // n_steps, n_seg - 1)
        out[j] = seg[idx]
    return out


def deviation_profiles(n_profiles: int, n_steps: int, seed: int) -> np.ndarray:
    """Random piecewise-constant scalar profiles, sup-norm one.

    Profile i is constant on min(2**i, 32) equal time segments with
    Gaussian values scaled so max_t |s(t)| = 1. Used to modulate
    deviation-proportional control perturbations s(t) Theta2 (x - E x);
    drawn from a stream independent of `perturbation_directions`.
    Shape (n_profiles, n_steps); deterministic in the seed.
    """
    key = np.array([np.uint64(seed), np.uint64((1 << 48) + 1)], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    out = np.empty((n_profiles, n_steps))
    for i in range(n_profiles):
        n_seg = min(2 ** i, 32)
        seg = rng.standard_normal(n_seg)
        seg /= np.abs(seg).max()
        idx = np.minimum((n_seg * np.arange(n_steps)) // n_steps, n_seg - 1)
        out[i] = seg[idx]
    return out


def perturbation_optimality(spec: ProblemSpec, law: FeedbackLaw, M: int = 10_000,
                            seed: int = 0, *, n_directions: int = 5, eps: float = 0.05,
                            agents: int = 4, sde_steps: int = 1000,
                            threads: int | None = None) -> PerturbationReport:
    """Estimate d/d eps of the limit cost along random control directions.

    The cost is exactly quadratic in eps, so the central difference
    (J(+eps) - J(-eps)) / (2 eps), computed per replication under common
    random numbers, estimates the first derivative with no curvature
    error. For an optimal law every derivative must vanish within
    3 stderr plus an allowance 1e-4 + eps^2 for time-discretization bias;
    a suboptimal law shows a derivative outside that band.

    Stationarity holds against every adapted perturbation, so the
    direction family covers both control channels: deterministic
    time-path shifts move the control and its conditional mean together
    (they cancel in u - E u, probing the mean-feedback gain), while
    deviation-proportional directions s(t) Theta2 (x - E x) are
    conditionally centered (probing the deviation gain directly, where
    a deterministic shift has no first-order reach). Half the
    directions, rounded down, use the deviation channel.

    Nearly all of the derivative's per-replication variance comes from
    the agent's own noise, not the common noise, so each replication
    averages several conditionally independent agents on its common
    path; the standard error shrinks close to 1/sqrt(draws) at linear
    cost. Mean-channel directions use agents // 2 agent streams;
    deviation-channel directions are noisier and use all `agents`
    streams together with their antithetic flip partners. On top of
    that, each derivative is adjusted by the control variate
    h = (J(+eps) + J(-eps)) / 2: h carries no derivative information
    (the estimate's mean is unchanged) but shares the path noise of the
    quadratic cost fluctuations, which shrinks the reported stderr by
    several-fold on the deviation channel. Perturbed costs must also
    never fall below the baseline (convexity of the cost in the
    control).

    This check needs time resolution only good enough that derivative
    bias stays well under the statistical tolerance, so it defaults to a
    coarser step count (1000 steps per unit time) than the cost
    estimators; that keeps the full direction sweep fast.
    """
    if agents < 1:
        raise ValueError(f"need at least one agent per replication, got {agents}")
    if not eps > 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    K = sde_step_count(spec.T, sde_steps)
    n_dev = n_directions // 2
    n_mean = n_directions - n_dev
    v_zero = np.zeros((K, spec.m))
    perts = [("mean", v, None) for v in perturbation_directions(n_mean, K, spec.m, seed)]
    perts += [("dev", v_zero, s) for s in deviation_profiles(n_dev, K, seed)]
    noise = NoiseBundle(seed=seed, M=M, N=agents, sde_steps=sde_steps)

    def run(pert, wide=False) -> np.ndarray:
        acc = np.zeros(M)
        if wide:
            streams = range(1, agents + 1)
            flips = (False, True)
        else:
            streams = range(1, max(1, agents // 2) + 1)
            flips = (False,)
        for stream in streams:
            for flip in flips:
                acc += limit_costs(spec, law, noise, agent_stream=stream,
                                   perturbation=pert, flip_agent=flip,
                                   threads=threads)
        return acc / (len(flips) * len(streams))

    base_samples = run((0.0, v_zero, None))
    baseline = CostEstimate(
        tag="MC_limit", mean=float(np.mean(base_samples)),
        stderr=float(np.std(base_samples, ddof=1) / np.sqrt(M)), M=M,
    )

    derivs = np.empty(n_directions)
    dstderrs = np.empty(n_directions)
    tols = np.empty(n_directions)
    convex = True
    allowance = 1e-4 + eps ** 2
    for j, (channel, v, s) in enumerate(perts):
        wide = channel == "dev"
        plus = run((eps, v, s), wide=wide)
        minus = run((-eps, v, s), wide=wide)
        d = (plus - minus) / (2.0 * eps)
        h = (plus + minus) / 2.0
        var_h = np.var(h, ddof=1)
        lam = np.cov(d, h)[0, 1] / var_h if var_h > 0.0 else 0.0
        resid = d - lam * (h - np.mean(h))
        derivs[j] = np.mean(d)
        dstderrs[j] = np.std(resid, ddof=1) / np.sqrt(M)
        tols[j] = 3.0 * dstderrs[j] + allowance
        for side in (plus, minus):
            rise = side - base_samples
            rise_se = np.std(rise, ddof=1) / np.sqrt(M)
            if np.mean(rise) < -(3.0 * rise_se + allowance):
                convex = False

    passed = bool(np.all(np.abs(derivs) <= tols)) and convex
    return PerturbationReport(
        eps=eps, M=M, agents=agents, baseline=baseline,
        channels=tuple(c for c, _, _ in perts),
        derivatives=derivs, derivative_stderrs=dstderrs, tolerances=tols,
        convexity_ok=convex, passed=passed,
    )


# ---------------------------------------------------------------------------
# benchmark battery with file artifacts
# ---------------------------------------------------------------------------

def write_r_eigs_csv(path, p1: RiccatiSolution, p2: RiccatiSolution,
                     p3: RiccatiSolution) -> None:
    """Ascending eigenvalues of the symmetrized gain operators per node."""
    sols = (p1, p2, p3)
    m = sols[0].R_op.shape[1]
    header = ["t"]
    for tag_idx in (1, 2, 3):
        header.extend(f"R{tag_idx}_eig_{j + 1}" for j in range(m))
    eigs = [np.linalg.eigvalsh(0.5 * (s.R_op + s.R_op.transpose(0, 2, 1))) for s in sols]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k, t in enumerate(sols[0].grid.nodes):
            row = [_FMT % t]
            for e in eigs:
                row.extend(_FMT % v for v in e[k])
            fh.write(",".join(row) + "\n")


def _weight_eig_check(tol: float = 1e-3) -> dict:
    from . import benchmark
    out = {}
    for name, mat in (("Q", benchmark.Q), ("R", benchmark.R), ("G", benchmark.G)):
        mat = np.asarray(mat, dtype=float)
        computed = np.linalg.eigvalsh(0.5 * (mat + mat.T))
        expected = np.asarray(WEIGHT_EIGENVALUES[name])
        out[name] = {
            "computed": [float(v) for v in computed],
            "expected": [float(v) for v in expected],
            "ok": bool(np.max(np.abs(computed - expected)) <= tol),
        }
    return out


def ordering_json(report: OrderingReport) -> dict:
    """JSON-ready dict of an OrderingReport, for report artifacts."""
    return {
        "value": report.value,
        "c": report.c,
        "slope": report.slope,
        "chain_holds": report.chain_holds,
        "mg_all_strict": report.mg_all_strict,
        "all_close": report.all_close,
        "per_N": [
            {
                "N": e.N, "M": e.M,
                "mt_mean": e.mt_mean, "mt_stderr": e.mt_stderr,
                "mg_mean": e.mg_mean, "mg_stderr": e.mg_stderr,
                "diff_mean": e.diff_mean, "diff_stderr": e.diff_stderr,
                "chain_lower_ok": e.chain_lower_ok,
                "chain_upper_ok": e.chain_upper_ok,
                "mg_gap_strict": e.mg_gap_strict,
                "closeness_ok": e.closeness_ok,
            }
            for e in report.entries
        ],
    }


def _costs_rows(report: OrderingReport):
    rows = [("MC_limit", 0, 0, report.value, 0.0)]
    for e in report.entries:
        rows.append(("MT_per_agent", e.N, e.M, e.mt_mean, e.mt_stderr))
        rows.append(("MG_individual", e.N, e.M, e.mg_mean, e.mg_stderr))
    return rows


def benchmark_report(output_dir, *, N_list=(4, 16, 64, 256), M_orderings: int = 500,
                     M_value: int = 10_000, seed: int = 0, n_t: int = 1000,
                     sde_steps: int = SDE_STEPS_DEFAULT,
                     threads: int | None = None) -> dict:
    """Run the benchmark battery; write r_eigs.csv, costs_vs_N.csv,
    costs_vs_N_special.csv and report.json into `output_dir`.

    Artifacts are deterministic byte for byte in (seed, sizes); they
    carry no timestamps and floats print with 17 significant digits.
    """
    os.makedirs(output_dir, exist_ok=True)
    prob = benchmark_problem(n_t=n_t)
    sprob = special_variant(n_t=n_t)

    p1 = solve_re1(prob, certify=False)
    p2 = solve_re2(prob, p1=p1, certify=False)
    p3 = solve_re3(prob, p1=p1, certify=False)
    sp1 = solve_re1(sprob, certify=False)
    sp2 = solve_re2(sprob, p1=sp1, certify=False)
    sp3 = solve_re3(sprob, p1=sp1, certify=False)

    law_mt = synthesize_mc_mt(prob, p1, p2)
    law_mg = synthesize_mg(prob, p1, p3)
    s_law_mt = synthesize_mc_mt(sprob, sp1, sp2)
    s_law_mg = synthesize_mg(sprob, sp1, sp3)

    value = mc_value(p2, prob.x0)
    est = estimate_cost_limit(prob, law_mt, M_value, seed,
                              sde_steps=sde_steps, threads=threads)
    value_ok = abs(est.mean - value) <= 3 * est.stderr + 0.02 * abs(value)

    ord_bench = ordering_check(prob, law_mt, law_mg, p2, N_list, M_orderings, seed,
                               sde_steps=sde_steps, threads=threads)
    ord_special = ordering_check(sprob, s_law_mt, s_law_mg, sp2, N_list, M_orderings,
                                 seed, sde_steps=sde_steps, threads=threads)
    equiv = equivalence_check(sprob, s_law_mt, s_law_mg, tol=1e-8)

    write_r_eigs_csv(os.path.join(output_dir, "r_eigs.csv"), p1, p2, p3)
    write_costs_csv(os.path.join(output_dir, "costs_vs_N.csv"), _costs_rows(ord_bench))
    write_costs_csv(os.path.join(output_dir, "costs_vs_N_special.csv"),
                    _costs_rows(ord_special))

    report = {
        "parameters": {
            "N_list": list(N_list), "M_orderings": M_orderings,
            "M_value": M_value, "seed": seed, "n_t": n_t, "sde_steps": sde_steps,
        },
        "weights": _weight_eig_check(),
        "regularity": {
            label: {
                s.tag: {"global_min": float(np.min(s.min_eig)),
                        "positive": bool(np.min(s.min_eig) > 0.0)}
                for s in sols
            }
            for label, sols in (("benchmark", (p1, p2, p3)),
                                ("special", (sp1, sp2, sp3)))
        },
        "value": {
            "exact": value,
            "estimate": est.mean,
            "stderr": est.stderr,
            "ok": bool(value_ok),
        },
        "ordering": ordering_json(ord_bench),
        "ordering_special": ordering_json(ord_special),
        "equivalence_special": {
            "max_diff_mean": equiv.max_diff_mean,
            "max_diff_dev": equiv.max_diff_dev,
            "tol": equiv.tol,
            "ok": equiv.equivalent,
        },
        "tolerances": {
            "weight_eigs": 1e-3,
            "value_rel": 0.02,
            "equivalence": 1e-8,
        },
    }

    with open(os.path.join(output_dir, "report.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report
