"""Monte Carlo simulation of the population and its mean-field limit.

Euler-Maruyama on a uniform grid with `sde_steps` steps per unit time.
Every agent applies the decentralized two-gain feedback

    u_i = theta_mean mbar + theta_dev (x_i - mbar),

where mbar is obtained by integrating the conditional-mean dynamics

    dm = (A_cal + B_cal theta_mean) m dt + (C0_cal + D0_cal theta_mean) m dW0

along the same observed common-noise path; agents never peek at the
realized population average.

Noise is counter-keyed: the Gaussian stream for (replication r, stream s)
comes from a Philox generator keyed by (seed, r << 32 | s), stream 0
being the common noise and streams 1..N the agents. Streams regenerate
exactly, are independent of any parallel schedule, and agent streams
coincide across different population sizes (common random numbers).

Empirical averages over agents are computed as sorted-value sums, which
makes them exactly invariant under any permutation of agent labels (a
plain pairwise sum is not, and one ulp would amplify through the
multiplicative dynamics).

Costs use left-endpoint quadrature:

    J = 1/2 sum_k dt (|x - Gamma1 ref|_Q^2 + |u|_R^2) + 1/2 |x(T) - Gamma2 ref(T)|_G^2,

with ref the population average (population system) or the conditional
mean (limit system).
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import Blowup, GridMismatch
from .model import ProblemSpec, aggregates
from .riccati import BLOWUP_GUARD, RiccatiSolution
from .strategy import FeedbackLaw

__all__ = [
    "NoiseBundle",
    "MeanProcessPath",
    "PopulationTrajectory",
    "LimitTrajectory",
    "CostEstimate",
    "agent_mean",
    "sde_step_count",
    "simulate_mean_process",
    "simulate_population",
    "simulate_limit",
    "simulate_limit_batch",
    "population_costs",
    "limit_costs",
    "empirical_mean_gap",
    "estimate_cost_population",
    "estimate_cost_limit",
    "mc_value",
    "write_costs_csv",
    "write_trajectory_csv",
]

SDE_STEPS_DEFAULT = 2000   # Euler-Maruyama steps per unit time


def _resolve_threads(threads) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("MFLQ_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"MFLQ_THREADS must be an integer, got {env!r}") from None
    return 1


def sde_step_count(T: float, sde_steps: int) -> int:
    """Total Euler steps over [0, T] at `sde_steps` steps per unit time."""
    return max(1, round(sde_steps * T))


@dataclass(frozen=True)
class NoiseBundle:
    """Counter-keyed Gaussian noise for M replications of N agents.

    The unit normals for (replication, stream, step) are a pure function
    of (seed, replication, stream, step); stream 0 drives the common
    noise, streams 1..N the agents. Regenerating any sub-stream yields
    identical values under any execution order.
    """

    seed: int
    M: int
    N: int
    sde_steps: int = SDE_STEPS_DEFAULT

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")
        if self.M < 1:
            raise ValueError(f"need at least one replication, got M={self.M}")
        if self.N < 1:
            raise ValueError(f"need at least one agent, got N={self.N}")
        if self.sde_steps < 1:
            raise ValueError(f"sde_steps must be >= 1, got {self.sde_steps}")

    def _generator(self, replication: int, stream: int) -> np.random.Generator:
        if not (0 <= replication < self.M):
            raise ValueError(f"replication {replication} outside [0, {self.M})")
        if not (0 <= stream <= self.N):
            raise ValueError(f"stream {stream} outside [0, {self.N}]")
        key = np.array(
            [np.uint64(self.seed), np.uint64((replication << 32) | stream)],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key))

    def normals(self, replication: int, stream: int, count: int) -> np.ndarray:
        """The first `count` unit normals of the given sub-stream."""
        return self._generator(replication, stream).standard_normal(count)

    def increments(self, replication: int, stream: int, count: int, dt: float) -> np.ndarray:
        """Brownian increments with variance dt each."""
        return self.normals(replication, stream, count) * np.sqrt(dt)


@dataclass(frozen=True)
class MeanProcessPath:
    """Conditional-mean path along one common-noise realization."""

    times: np.ndarray           # (K+1,)
    values: np.ndarray          # (K+1, n)
    w0_increments: np.ndarray   # (K,)


@dataclass(frozen=True)
class PopulationTrajectory:
    """One replication of the N-agent system.

    states: (N, K+1, n); controls: (N, K, m) at left endpoints;
    empirical_mean / empirical_control_mean are the exact (sorted-sum)
    arithmetic averages over agents of the stored paths.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    empirical_mean: np.ndarray           # (K+1, n)
    empirical_control_mean: np.ndarray   # (K, m)
    mean_process: MeanProcessPath


@dataclass(frozen=True)
class LimitTrajectory:
    """One agent of the mean-field limit system along one (W0, Wi) pair."""

    times: np.ndarray       # (K+1,)
    state: np.ndarray       # (K+1, n)
    control: np.ndarray     # (K, m)
    mean: np.ndarray        # (K+1, n)


@dataclass(frozen=True)
class CostEstimate:
    """Monte Carlo cost estimate over M replications."""

    tag: str      # 'MG_individual' | 'MT_social' | 'MT_per_agent' | 'MC_limit'
    mean: float
    stderr: float
    M: int

    def __post_init__(self):
        if self.M < 2:
            raise ValueError(f"an estimate needs M >= 2 replications, got {self.M}")


def agent_mean(arr: np.ndarray) -> np.ndarray:
    """Arithmetic average over axis 1, summed in sorted order.

    Sorting each component's values before the pairwise sum makes the
    result exactly invariant under any permutation of the agent axis.
    """
    return np.sort(arr, axis=1).sum(axis=1) / arr.shape[1]


def _estimate(tag: str, samples: np.ndarray) -> CostEstimate:
    M = len(samples)
    if M < 2:
        raise ValueError(f"an estimate needs M >= 2 replications, got {M}")
    return CostEstimate(
        tag=tag,
        mean=float(np.mean(samples)),
        stderr=float(np.std(samples, ddof=1) / np.sqrt(M)),
        M=M,
    )


def _quad(v: np.ndarray, M: np.ndarray) -> np.ndarray:
    """|v|_M^2 along the last axis."""
    return ((v @ M) * v).sum(axis=-1)


# ---------------------------------------------------------------------------
# per-step coefficient tables on the SDE grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _SimCoeffs:
    """Everything the step loop needs, resolved at the K left endpoints."""

    dt: float
    times: np.ndarray      # (K+1,)
    x0: np.ndarray
    A: np.ndarray          # (K, n, n) and so on
    A_bar: np.ndarray
    B: np.ndarray
    B_bar: np.ndarray
    C: np.ndarray
    C_bar: np.ndarray
    C0: np.ndarray
    C0_bar: np.ndarray
    D: np.ndarray
    D_bar: np.ndarray
    D0: np.ndarray
    D0_bar: np.ndarray
    A_cal: np.ndarray
    B_cal: np.ndarray
    C0_cal: np.ndarray
    D0_cal: np.ndarray
    th_mean: np.ndarray    # (K, m, n)
    th_dev: np.ndarray
    Q: np.ndarray          # (K, n, n)
    R: np.ndarray          # (K, m, m)
    Gamma1: np.ndarray     # (K, n, n)
    G: np.ndarray          # (n, n)
    Gamma2: np.ndarray


def _prepare(spec: ProblemSpec, law: FeedbackLaw, n_steps: int) -> _SimCoeffs:
    if abs(law.grid.T - spec.T) > 1e-12 * max(1.0, spec.T):
        raise GridMismatch(
            f"law synthesized for horizon T={law.grid.T}, problem instance has T={spec.T}"
        )
    K = n_steps
    times = np.linspace(0.0, spec.T, K + 1)
    left = times[:-1]
    c, w = spec.coeffs, spec.weights
    ag = aggregates(spec)
    th_mean, th_dev = law.gains_at(left)
    return _SimCoeffs(
        dt=spec.T / K,
        times=times,
        x0=np.asarray(spec.x0, dtype=float),
        A=c.A.at_many(left), A_bar=c.A_bar.at_many(left),
        B=c.B.at_many(left), B_bar=c.B_bar.at_many(left),
        C=c.C.at_many(left), C_bar=c.C_bar.at_many(left),
        C0=c.C0.at_many(left), C0_bar=c.C0_bar.at_many(left),
        D=c.D.at_many(left), D_bar=c.D_bar.at_many(left),
        D0=c.D0.at_many(left), D0_bar=c.D0_bar.at_many(left),
        A_cal=ag.A_cal.at_many(left), B_cal=ag.B_cal.at_many(left),
        C0_cal=ag.C0_cal.at_many(left), D0_cal=ag.D0_cal.at_many(left),
        th_mean=th_mean, th_dev=th_dev,
        Q=w.Q.at_many(left), R=w.R.at_many(left), Gamma1=w.Gamma1.at_many(left),
        G=np.asarray(w.G, dtype=float), Gamma2=np.asarray(w.Gamma2, dtype=float),
    )


def _check_blowup(what: str, x: np.ndarray, t: float):
    norm = float(np.max(np.abs(x)))
    if not np.isfinite(norm) or norm > BLOWUP_GUARD:
        raise Blowup(what, t, norm, BLOWUP_GUARD)


# ---------------------------------------------------------------------------
# population engine
# ---------------------------------------------------------------------------

def _population_chunk(sc: _SimCoeffs, noise, reps, *, record=False, want_terminal=False):
    """Advance a batch of replications; accumulate per-(rep, agent) costs."""
    B = len(reps)
    K = len(sc.times) - 1
    N = noise.N
    n = sc.x0.shape[0]
    m_dim = sc.th_mean.shape[1]
    dt = sc.dt
    sq = np.sqrt(dt)

    dW = np.empty((B, N + 1, K))
    for b, r in enumerate(reps):
        for s in range(N + 1):
            dW[b, s] = noise.normals(r, s, K)
    dW *= sq

    x = np.broadcast_to(sc.x0, (B, N, n)).copy()
    mbar = np.broadcast_to(sc.x0, (B, n)).copy()
    cost = np.zeros((B, N))

    if record:
        xs = np.empty((K + 1, B, N, n))
        us = np.empty((K, B, N, m_dim))
        ms = np.empty((K + 1, B, n))
        xs[0] = x
        ms[0] = mbar

    for k in range(K):
        um = mbar @ sc.th_mean[k].T                                   # (B, m)
        u = um[:, None, :] + (x - mbar[:, None, :]) @ sc.th_dev[k].T  # (B, N, m)
        pooled = agent_mean(np.concatenate((x, u), axis=2))           # (B, n+m)
        xN, uN = pooled[:, :n], pooled[:, n:]

        track = x - (xN @ sc.Gamma1[k].T)[:, None, :]
        cost += (0.5 * dt) * (_quad(track, sc.Q[k]) + _quad(u, sc.R[k]))

        drift = x @ sc.A[k].T + u @ sc.B[k].T
        drift += (xN @ sc.A_bar[k].T + uN @ sc.B_bar[k].T)[:, None, :]
        diff = x @ sc.C[k].T + u @ sc.D[k].T
        diff += (xN @ sc.C_bar[k].T + uN @ sc.D_bar[k].T)[:, None, :]
        diff0 = x @ sc.C0[k].T + u @ sc.D0[k].T
        diff0 += (xN @ sc.C0_bar[k].T + uN @ sc.D0_bar[k].T)[:, None, :]

        dW0 = dW[:, 0, k]
        dWi = dW[:, 1:, k]
        if record:
            us[k] = u
        x = x + drift * dt + diff * dWi[:, :, None] + diff0 * dW0[:, None, None]
        mbar = mbar + (mbar @ sc.A_cal[k].T + um @ sc.B_cal[k].T) * dt \
            + (mbar @ sc.C0_cal[k].T + um @ sc.D0_cal[k].T) * dW0[:, None]
        _check_blowup("population", x, sc.times[k + 1])
        if record:
            xs[k + 1] = x
            ms[k + 1] = mbar

    xN_T = agent_mean(x)
    track = x - (xN_T @ sc.Gamma2.T)[:, None, :]
    cost += 0.5 * _quad(track, sc.G)

    extras = {}
    if want_terminal:
        extras["x_T"] = x
        extras["xN_T"] = xN_T
        extras["m_T"] = mbar
    if record:
        extras["states"] = xs
        extras["controls"] = us
        extras["means"] = ms
        extras["w0"] = dW[:, 0, :]
    return cost, extras


def _chunk_ranges(M: int, chunk: int):
    return [(lo, min(lo + chunk, M)) for lo in range(0, M, chunk)]


def _run_chunked(worker, M: int, chunk: int, threads: int):
    """Run `worker(lo, hi)` over chunks; assemble results in index order."""
    ranges = _chunk_ranges(M, chunk)
    results = [None] * len(ranges)
    if threads <= 1 or len(ranges) <= 1:
        for i, (lo, hi) in enumerate(ranges):
            results[i] = worker(lo, hi)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(worker, lo, hi): i for i, (lo, hi) in enumerate(ranges)}
            for fut, i in futures.items():
                results[i] = fut.result()
    return results


def _population_chunk_size(N: int, K: int, M: int) -> int:
    # sized so the per-chunk noise buffer stays around 200 MB
    return max(1, min(M, 24_000_000 // ((N + 1) * K)))


def population_costs(spec: ProblemSpec, law: FeedbackLaw, noise: NoiseBundle,
                     *, threads: int | None = None) -> np.ndarray:
    """Total cost of every (replication, agent) pair; shape (M, N).

    Replications are independent; the result does not depend on the
    chunking or the thread count.
    """
    threads = _resolve_threads(threads)
    K = sde_step_count(spec.T, noise.sde_steps)
    sc = _prepare(spec, law, K)
    out = np.empty((noise.M, noise.N))

    def worker(lo, hi):
        cost, _ = _population_chunk(sc, noise, range(lo, hi))
        return lo, cost

    chunk = _population_chunk_size(noise.N, K, noise.M)
    for lo, cost in _run_chunked(worker, noise.M, chunk, threads):
        out[lo:lo + len(cost)] = cost
    return out


def empirical_mean_gap(spec: ProblemSpec, law: FeedbackLaw, noise: NoiseBundle,
                       *, threads: int | None = None) -> np.ndarray:
    """Per replication, |x^(N)(T) - mbar(T)|_2: the terminal gap between
    the realized population average and the conditional mean it tracks."""
    threads = _resolve_threads(threads)
    K = sde_step_count(spec.T, noise.sde_steps)
    sc = _prepare(spec, law, K)
    out = np.empty(noise.M)

    def worker(lo, hi):
        _, extras = _population_chunk(sc, noise, range(lo, hi), want_terminal=True)
        return lo, np.linalg.norm(extras["xN_T"] - extras["m_T"], axis=1)

    chunk = _population_chunk_size(noise.N, K, noise.M)
    for lo, gap in _run_chunked(worker, noise.M, chunk, threads):
        out[lo:lo + len(gap)] = gap
    return out


def simulate_population(spec: ProblemSpec, law: FeedbackLaw, noise: NoiseBundle,
                        replication: int) -> PopulationTrajectory:
    """Full paths of one replication of the N-agent system."""
    K = sde_step_count(spec.T, noise.sde_steps)
    sc = _prepare(spec, law, K)
    _, extras = _population_chunk(sc, noise, [replication], record=True)
    states = np.ascontiguousarray(extras["states"][:, 0].transpose(1, 0, 2))   # (N, K+1, n)
    controls = np.ascontiguousarray(extras["controls"][:, 0].transpose(1, 0, 2))
    emp_mean = agent_mean(extras["states"][:, 0])          # (K+1, n): axis 1 is agents
    emp_u = agent_mean(extras["controls"][:, 0])
    mp = MeanProcessPath(
        times=sc.times,
        values=extras["means"][:, 0],
        w0_increments=extras["w0"][0],
    )
    return PopulationTrajectory(
        times=sc.times,
        states=states,
        controls=controls,
        empirical_mean=emp_mean,
        empirical_control_mean=emp_u,
        mean_process=mp,
    )


# ---------------------------------------------------------------------------
# mean process and limit engine
# ---------------------------------------------------------------------------

def simulate_mean_process(spec: ProblemSpec, law: FeedbackLaw,
                          w0_increments: np.ndarray, x0=None) -> MeanProcessPath:
    """Integrate the conditional-mean dynamics along a given W0 path."""
    w0 = np.asarray(w0_increments, dtype=float)
    K = len(w0)
    sc = _prepare(spec, law, K)
    m = sc.x0.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    values = np.empty((K + 1, len(m)))
    values[0] = m
    dt = sc.dt
    for k in range(K):
        um = sc.th_mean[k] @ m
        m = m + (sc.A_cal[k] @ m + sc.B_cal[k] @ um) * dt \
            + (sc.C0_cal[k] @ m + sc.D0_cal[k] @ um) * w0[k]
        _check_blowup("mean-process", m, sc.times[k + 1])
        values[k + 1] = m
    return MeanProcessPath(times=sc.times, values=values, w0_increments=w0)


def _limit_chunk(sc: _SimCoeffs, noise, reps, agent_stream, *,
                 perturbation=None, record=False, flip_agent=False):
    """Advance a batch of limit-system replications (one agent each).

    `perturbation` is (eps, v, s) with v of shape (K, m) and s of shape
    (K,) or None: the control becomes u + eps (v(t) + s(t) Theta2 (x - y))
    where y is the conditional mean of the perturbed state, tracked by
    its own process (the dynamics and the cost reference the true
    conditional expectations of the perturbed system). The s-part is
    conditionally centered, so it probes the deviation channel without
    moving the mean control.

    `flip_agent` negates the agent's idiosyncratic increments (an
    equal-in-law antithetic partner sharing the common path); averaging a
    flip pair cancels cost fluctuations that are odd in the deviation.
    """
    B = len(reps)
    K = len(sc.times) - 1
    n = sc.x0.shape[0]
    m_dim = sc.th_mean.shape[1]
    dt = sc.dt
    sq = np.sqrt(dt)

    dW0 = np.empty((B, K))
    dWi = np.empty((B, K))
    for b, r in enumerate(reps):
        dW0[b] = noise.normals(r, 0, K)
        dWi[b] = noise.normals(r, agent_stream, K)
    dW0 *= sq
    dWi *= -sq if flip_agent else sq

    x = np.broadcast_to(sc.x0, (B, n)).copy()
    mbar = np.broadcast_to(sc.x0, (B, n)).copy()
    perturbed = perturbation is not None
    if perturbed:
        eps, v, s = perturbation
        y = mbar.copy()
    cost = np.zeros(B)

    if record:
        xs = np.empty((K + 1, B, n))
        us = np.empty((K, B, m_dim))
        ms = np.empty((K + 1, B, n))
        xs[0] = x
        ms[0] = mbar

    for k in range(K):
        um = mbar @ sc.th_mean[k].T
        u = um + (x - mbar) @ sc.th_dev[k].T
        if perturbed:
            u = u + eps * v[k]
            if s is not None:
                u = u + (eps * s[k]) * ((x - y) @ sc.th_dev[k].T)
            Eu = um + (y - mbar) @ sc.th_dev[k].T + eps * v[k]
            ref = y
        else:
            Eu = um
            ref = mbar

        track = x - ref @ sc.Gamma1[k].T
        cost += (0.5 * dt) * (_quad(track, sc.Q[k]) + _quad(u, sc.R[k]))

        drift = x @ sc.A[k].T + ref @ sc.A_bar[k].T + u @ sc.B[k].T + Eu @ sc.B_bar[k].T
        diff = x @ sc.C[k].T + ref @ sc.C_bar[k].T + u @ sc.D[k].T + Eu @ sc.D_bar[k].T
        diff0 = x @ sc.C0[k].T + ref @ sc.C0_bar[k].T + u @ sc.D0[k].T + Eu @ sc.D0_bar[k].T

        if record:
            us[k] = u
        w0k = dW0[:, k][:, None]
        x = x + drift * dt + diff * dWi[:, k][:, None] + diff0 * w0k
        if perturbed:
            y = y + (y @ sc.A_cal[k].T + Eu @ sc.B_cal[k].T) * dt \
                + (y @ sc.C0_cal[k].T + Eu @ sc.D0_cal[k].T) * w0k
        mbar = mbar + (mbar @ sc.A_cal[k].T + um @ sc.B_cal[k].T) * dt \
            + (mbar @ sc.C0_cal[k].T + um @ sc.D0_cal[k].T) * w0k
        _check_blowup("limit", x, sc.times[k + 1])
        if record:
            xs[k + 1] = x
            ms[k + 1] = mbar

    ref_T = y if perturbed else mbar
    track = x - ref_T @ sc.Gamma2.T
    cost += 0.5 * _quad(track, sc.G)

    extras = {}
    if record:
        extras["states"] = xs
        extras["controls"] = us
        extras["means"] = ms
    return cost, extras


def limit_costs(spec: ProblemSpec, law: FeedbackLaw, noise: NoiseBundle,
                *, agent_stream: int = 1, perturbation=None,
                flip_agent: bool = False,
                threads: int | None = None) -> np.ndarray:
    """Per-replication cost of the limit system; shape (M,).

    Each replication runs one agent on (stream 0, stream `agent_stream`);
    `flip_agent` runs the antithetic partner of that agent stream.
    """
    threads = _resolve_threads(threads)
    K = sde_step_count(spec.T, noise.sde_steps)
    sc = _prepare(spec, law, K)
    if perturbation is not None:
        eps, v, *rest = perturbation
        v = np.asarray(v, dtype=float)
        if v.shape != (K, spec.m):
            raise ValueError(f"perturbation path has shape {v.shape}, expected ({K}, {spec.m})")
        s = rest[0] if rest else None
        if s is not None:
            s = np.asarray(s, dtype=float)
            if s.shape != (K,):
                raise ValueError(f"deviation profile has shape {s.shape}, expected ({K},)")
        perturbation = (float(eps), v, s)
    out = np.empty(noise.M)

    def worker(lo, hi):
        cost, _ = _limit_chunk(sc, noise, range(lo, hi), agent_stream,
                               perturbation=perturbation, flip_agent=flip_agent)
        return lo, cost

    chunk = max(1, min(noise.M, 24_000_000 // (2 * K)))
    for lo, cost in _run_chunked(worker, noise.M, chunk, threads):
        out[lo:lo + len(cost)] = cost
    return out


def simulate_limit(spec: ProblemSpec, law: FeedbackLaw, noise: NoiseBundle,
                   replication: int, agent: int = 1) -> LimitTrajectory:
    """Full path of one limit-system agent along (W0, W_agent)."""
    K = sde_step_count(spec.T, noise.sde_steps)
    sc = _prepare(spec, law, K)
    _, extras = _limit_chunk(sc, noise, [replication], agent, record=True)
    return LimitTrajectory(
        times=sc.times,
        state=extras["states"][:, 0],
        control=extras["controls"][:, 0],
        mean=extras["means"][:, 0],
    )


def simulate_limit_batch(spec: ProblemSpec, law: FeedbackLaw, noise: NoiseBundle,
                         replication: int, agents) -> tuple[np.ndarray, np.ndarray]:
    """Terminal states of many limit-system agents sharing one W0 path.

    Returns (states_T with shape (len(agents), n), mean_T with shape (n,)).
    Useful for checking that the conditional-expectation operator is
    realized consistently: the sample average of states over agents must
    approach the mean process.
    """
    agents = list(agents)
    K = sde_step_count(spec.T, noise.sde_steps)
    sc = _prepare(spec, law, K)
    B = len(agents)
    n = sc.x0.shape[0]
    dt = sc.dt
    sq = np.sqrt(dt)

    dW0 = noise.normals(replication, 0, K) * sq          # shared by all agents
    dWi = np.empty((B, K))
    for b, a in enumerate(agents):
        dWi[b] = noise.normals(replication, a, K)
    dWi *= sq

    x = np.broadcast_to(sc.x0, (B, n)).copy()
    mbar = sc.x0.copy()
    for k in range(K):
        um = sc.th_mean[k] @ mbar
        u = (x - mbar) @ sc.th_dev[k].T + um
        Eu = um
        drift = x @ sc.A[k].T + mbar @ sc.A_bar[k].T + u @ sc.B[k].T + Eu @ sc.B_bar[k].T
        diff = x @ sc.C[k].T + mbar @ sc.C_bar[k].T + u @ sc.D[k].T + Eu @ sc.D_bar[k].T
        diff0 = x @ sc.C0[k].T + mbar @ sc.C0_bar[k].T + u @ sc.D0[k].T + Eu @ sc.D0_bar[k].T
        x = x + drift * dt + diff * dWi[:, k][:, None] + diff0 * dW0[k]
        mbar = mbar + (sc.A_cal[k] @ mbar + sc.B_cal[k] @ um) * dt \
            + (sc.C0_cal[k] @ mbar + sc.D0_cal[k] @ um) * dW0[k]
        _check_blowup("limit", x, sc.times[k + 1])
    return x, mbar


# ---------------------------------------------------------------------------
# cost estimation
# ---------------------------------------------------------------------------

def _trajectory_cost_samples(spec: ProblemSpec, trajectories) -> np.ndarray:
    """Per-(replication, agent) quadrature costs from stored paths; (M, N)."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("empty replication set: no trajectories given")
    w = spec.weights
    rows = []
    for traj in trajectories:
        times = traj.times
        left = times[:-1]
        dt = float(times[1] - times[0])
        Q = w.Q.at_many(left)
        R = w.R.at_many(left)
        G1 = w.Gamma1.at_many(left)
        xN = traj.empirical_mean                       # (K+1, n)
        x = traj.states                                # (N, K+1, n)
        u = traj.controls                              # (N, K, m)
        track = x[:, :-1, :] - np.einsum("kij,kj->ki", G1, xN[:-1])[None]
        run = np.einsum("nki,kij,nkj->nk", track, Q, track) \
            + np.einsum("nki,kij,nkj->nk", u, R, u)

        term = x[:, -1, :] - (spec.weights.Gamma2 @ xN[-1])[None]
        cost = (0.5 * dt) * run.sum(axis=1) + 0.5 * ((term @ spec.weights.G) * term).sum(-1)
        rows.append(cost)
    return np.stack(rows)


def estimate_cost_population(spec: ProblemSpec, trajectories, agent: int | None = None,
                             tag: str = "MT_per_agent") -> CostEstimate:
    """Cost estimate from stored population trajectories.

    tag 'MG_individual' requires `agent` and averages that agent's cost;
    'MT_social' sums over agents; 'MT_per_agent' divides the sum by N.
    """
    per_agent = _trajectory_cost_samples(spec, trajectories)   # (M, N)
    if tag == "MG_individual":
        if agent is None:
            raise ValueError("MG_individual needs an agent index")
        samples = per_agent[:, agent]
    elif tag == "MT_social":
        samples = np.sort(per_agent, axis=1).sum(axis=1)
    elif tag == "MT_per_agent":
        samples = agent_mean(per_agent)
    else:
        raise ValueError(f"unknown tag {tag!r}")
    return _estimate(tag, samples)


def estimate_cost_limit(spec: ProblemSpec, law: FeedbackLaw, M: int, seed: int,
                        *, sde_steps: int = SDE_STEPS_DEFAULT,
                        threads: int | None = None) -> CostEstimate:
    """Monte Carlo estimate of the limit-system cost under `law`."""
    noise = NoiseBundle(seed=seed, M=M, N=1, sde_steps=sde_steps)
    samples = limit_costs(spec, law, noise, threads=threads)
    return _estimate("MC_limit", samples)


def mc_value(p2: RiccatiSolution, x0) -> float:
    """Exact limit-control value 1/2 <P2(0) x0, x0>."""
    if p2.tag != "RE2":
        raise ValueError(f"the value formula needs an RE2 solution, got {p2.tag!r}")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    return float(0.5 * x0 @ p2.P[0] @ x0)


# ---------------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------------

_FMT = "%.17g"


def write_costs_csv(path, rows) -> None:
    """Rows of (problem_tag, N, M, mean, stderr)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("problem_tag,N,M,mean,stderr\n")
        for tag, N, M, mean, stderr in rows:
            fh.write(f"{tag},{N},{M},{_FMT % mean},{_FMT % stderr}\n")


def write_trajectory_csv(traj: PopulationTrajectory, path) -> None:
    """Long format: t, agent, x_1..x_n, u_1..u_m.

    Controls are left-endpoint values; the terminal row leaves the
    control columns empty rather than fabricating one.
    """
    N, K1, n = traj.states.shape
    m = traj.controls.shape[2]
    header = ["t", "agent"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{j + 1}" for j in range(m)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(N):
            for k in range(K1):
                row = [_FMT % traj.times[k], str(i)]
                row.extend(_FMT % v for v in traj.states[i, k])
                if k < K1 - 1:
                    row.extend(_FMT % v for v in traj.controls[i, k])
                else:
                    row.extend([""] * m)
                fh.write(",".join(row) + "\n")
