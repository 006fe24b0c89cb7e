"""Decentralized feedback synthesis from Riccati solutions.

Every admissible law here has the two-gain form

    u_i(t) = theta_mean(t) mbar(t) + theta_dev(t) (x_i(t) - mbar(t)),

where mbar is the conditional mean process driven by the common noise.
The deviation gain is shared by every solution concept:

    theta_dev = -R1^{-1} (B'P1 + D'P1 C + D0'P1 C0).

The team/control law (tag MC_MT, one law for both problems) uses

    theta_mean = -R2^{-1} (B_cal'P2 + D_cal'P1 C_cal + D0_cal'P2 C0_cal),

while the game-consistent law (tag MG) replaces the mean gain by

    theta_mean = -R3^{-1} (B'P3 + D'P1 C_cal + D0'P3 C0_cal),

with R3 from the asymmetric mean-part equation. There is deliberately no
separate team synthesis entry point: the control and team laws coincide.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch
from .model import ProblemSpec, aggregates
from .riccati import RiccatiSolution, TimeGrid, _solve_gen, _solve_sym

__all__ = [
    "FeedbackLaw",
    "ClosedLoopCoefficients",
    "EquivalenceReport",
    "synthesize_mc_mt",
    "synthesize_mg",
    "closed_loop",
    "equivalence_check",
    "write_gains_csv",
]


@dataclass(frozen=True)
class FeedbackLaw:
    """Node values of the two gains on the Riccati grid.

    Shapes: theta_mean, theta_dev are (n_t + 1, m, n). Between nodes the
    gains are interpolated linearly (`gains_at`).
    """

    tag: str                  # 'MC_MT' | 'MG'
    grid: TimeGrid
    theta_mean: np.ndarray
    theta_dev: np.ndarray

    def gains_at(self, times) -> tuple[np.ndarray, np.ndarray]:
        """Linear interpolation of both gains at arbitrary times in [0, T]."""
        times = np.asarray(times, dtype=float)
        scalar = times.ndim == 0
        times = np.atleast_1d(times)
        dt = self.grid.dt
        pos = np.clip(times / dt, 0.0, float(self.grid.n_t))
        idx = np.minimum(pos.astype(int), self.grid.n_t - 1)
        w = (pos - idx)[:, None, None]
        mean = (1.0 - w) * self.theta_mean[idx] + w * self.theta_mean[idx + 1]
        dev = (1.0 - w) * self.theta_dev[idx] + w * self.theta_dev[idx + 1]
        if scalar:
            return mean[0], dev[0]
        return mean, dev


@dataclass(frozen=True)
class ClosedLoopCoefficients:
    """Closed-loop matrices per node, split into deviation and mean parts.

    dev_* feed x_i - mbar, mean_* feed mbar:
      dev_drift  = A + B theta_dev          mean_drift  = A_cal + B_cal theta_mean
      dev_diff   = C + D theta_dev          mean_diff   = C_cal + D_cal theta_mean
      dev_diff0  = C0 + D0 theta_dev        mean_diff0  = C0_cal + D0_cal theta_mean
    All arrays have shape (n_t + 1, n, n).
    """

    grid: TimeGrid
    dev_drift: np.ndarray
    dev_diff: np.ndarray
    dev_diff0: np.ndarray
    mean_drift: np.ndarray
    mean_diff: np.ndarray
    mean_diff0: np.ndarray


@dataclass(frozen=True)
class EquivalenceReport:
    """Max-norm gaps between two laws over all shared grid nodes."""

    max_diff_mean: float
    max_diff_dev: float
    tol: float
    equivalent: bool


def _deviation_gains(spec: ProblemSpec, p1: RiccatiSolution) -> np.ndarray:
    """theta_dev per node; identical construction for every law."""
    c = spec.coeffs
    nodes = p1.grid.nodes
    out = np.empty((len(nodes), spec.m, spec.n))
    for k, t in enumerate(nodes):
        B, C, C0 = c.B.at(t), c.C.at(t), c.C0.at(t)
        D, D0 = c.D.at(t), c.D0.at(t)
        P1 = p1.P[k]
        rhs = B.T @ P1 + D.T @ P1 @ C + D0.T @ P1 @ C0
        out[k] = -_solve_sym("RE1", p1.R_op[k], rhs, t)
    return out


def _require_grid(a: RiccatiSolution, b: RiccatiSolution):
    if a.grid != b.grid:
        raise GridMismatch(
            f"solutions live on different grids: n_t={a.grid.n_t} vs n_t={b.grid.n_t}"
        )


def synthesize_mc_mt(spec: ProblemSpec, p1: RiccatiSolution,
                     p2: RiccatiSolution) -> FeedbackLaw:
    """The control law, which is also the team law (tag MC_MT)."""
    if p1.tag != "RE1" or p2.tag != "RE2":
        raise ValueError(f"expected (RE1, RE2) solutions, got ({p1.tag!r}, {p2.tag!r})")
    _require_grid(p1, p2)
    ag = aggregates(spec)
    nodes = p1.grid.nodes
    mean = np.empty((len(nodes), spec.m, spec.n))
    for k, t in enumerate(nodes):
        B_cal, C_cal = ag.B_cal.at(t), ag.C_cal.at(t)
        C0_cal, D_cal, D0_cal = ag.C0_cal.at(t), ag.D_cal.at(t), ag.D0_cal.at(t)
        P1, P2 = p1.P[k], p2.P[k]
        rhs = B_cal.T @ P2 + D_cal.T @ P1 @ C_cal + D0_cal.T @ P2 @ C0_cal
        mean[k] = -_solve_sym("RE2", p2.R_op[k], rhs, t)
    dev = _deviation_gains(spec, p1)
    for arr in (mean, dev):
        arr.setflags(write=False)
    return FeedbackLaw(tag="MC_MT", grid=p1.grid, theta_mean=mean, theta_dev=dev)


def synthesize_mg(spec: ProblemSpec, p1: RiccatiSolution,
                  p3: RiccatiSolution) -> FeedbackLaw:
    """The game-consistent law (tag MG); only the mean gain differs."""
    if p1.tag != "RE1" or p3.tag != "RE3":
        raise ValueError(f"expected (RE1, RE3) solutions, got ({p1.tag!r}, {p3.tag!r})")
    _require_grid(p1, p3)
    c = spec.coeffs
    ag = aggregates(spec)
    nodes = p1.grid.nodes
    mean = np.empty((len(nodes), spec.m, spec.n))
    for k, t in enumerate(nodes):
        B, D, D0 = c.B.at(t), c.D.at(t), c.D0.at(t)
        C_cal, C0_cal = ag.C_cal.at(t), ag.C0_cal.at(t)
        P1, P3 = p1.P[k], p3.P[k]
        rhs = B.T @ P3 + D.T @ P1 @ C_cal + D0.T @ P3 @ C0_cal
        mean[k] = -_solve_gen("RE3", p3.R_op[k], rhs, t)
    dev = _deviation_gains(spec, p1)
    for arr in (mean, dev):
        arr.setflags(write=False)
    return FeedbackLaw(tag="MG", grid=p1.grid, theta_mean=mean, theta_dev=dev)


def closed_loop(spec: ProblemSpec, law: FeedbackLaw) -> ClosedLoopCoefficients:
    """Assemble the closed-loop coefficient paths for the given law."""
    c = spec.coeffs
    ag = aggregates(spec)
    nodes = law.grid.nodes
    n = spec.n
    shapes = (len(nodes), n, n)
    dev_drift = np.empty(shapes)
    dev_diff = np.empty(shapes)
    dev_diff0 = np.empty(shapes)
    mean_drift = np.empty(shapes)
    mean_diff = np.empty(shapes)
    mean_diff0 = np.empty(shapes)
    for k, t in enumerate(nodes):
        th_m, th_d = law.theta_mean[k], law.theta_dev[k]
        dev_drift[k] = c.A.at(t) + c.B.at(t) @ th_d
        dev_diff[k] = c.C.at(t) + c.D.at(t) @ th_d
        dev_diff0[k] = c.C0.at(t) + c.D0.at(t) @ th_d
        mean_drift[k] = ag.A_cal.at(t) + ag.B_cal.at(t) @ th_m
        mean_diff[k] = ag.C_cal.at(t) + ag.D_cal.at(t) @ th_m
        mean_diff0[k] = ag.C0_cal.at(t) + ag.D0_cal.at(t) @ th_m
    out = ClosedLoopCoefficients(
        grid=law.grid,
        dev_drift=dev_drift, dev_diff=dev_diff, dev_diff0=dev_diff0,
        mean_drift=mean_drift, mean_diff=mean_diff, mean_diff0=mean_diff0,
    )
    for arr in (dev_drift, dev_diff, dev_diff0, mean_drift, mean_diff, mean_diff0):
        arr.setflags(write=False)
    return out


def equivalence_check(spec: ProblemSpec, law_a: FeedbackLaw, law_b: FeedbackLaw,
                      tol: float = 1e-8) -> EquivalenceReport:
    """Max-norm comparison of two laws node by node."""
    if law_a.grid != law_b.grid:
        raise GridMismatch(
            f"laws live on different grids: n_t={law_a.grid.n_t} vs n_t={law_b.grid.n_t}"
        )
    d_mean = float(np.max(np.abs(law_a.theta_mean - law_b.theta_mean)))
    d_dev = float(np.max(np.abs(law_a.theta_dev - law_b.theta_dev)))
    return EquivalenceReport(
        max_diff_mean=d_mean,
        max_diff_dev=d_dev,
        tol=tol,
        equivalent=bool(d_mean <= tol and d_dev <= tol),
    )


def write_gains_csv(law: FeedbackLaw, path) -> None:
    """Columns: t, theta_mean_11.., theta_dev_11.. (row-major), 17 digits."""
    m, n = law.theta_mean.shape[1:]
    header = ["t"]
    header += [f"theta_mean_{i + 1}{j + 1}" for i in range(m) for j in range(n)]
    header += [f"theta_dev_{i + 1}{j + 1}" for i in range(m) for j in range(n)]
    fmt = "%.17g"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k, t in enumerate(law.grid.nodes):
            row = [fmt % t]
            row.extend(fmt % v for v in law.theta_mean[k].reshape(-1))
            row.extend(fmt % v for v in law.theta_dev[k].reshape(-1))
            fh.write(",".join(row) + "\n")
