"""Backward Riccati solvers for the mean-field synthesis.

Three terminal-value matrix ODEs on a shared uniform grid drive the
feedback gains. With R1 = D'P1 D + D0'P1 D0 + R and aggregate
coefficients written as `cal` sums (A_cal = A + A_bar, ...):

RE1 (deviation part, symmetric):
    P1' + P1 A + A'P1 + C'P1 C + C0'P1 C0 + Q
        - (P1 B + C'P1 D + C0'P1 D0) R1^{-1} (B'P1 + D'P1 C + D0'P1 C0) = 0,
    P1(T) = G.

RE2 (mean part for team/control, symmetric), with
R2 = D_cal'P1 D_cal + D0_cal'P2 D0_cal + R:
    P2' + P2 A_cal + A_cal'P2 + C_cal'P1 C_cal + C0_cal'P2 C0_cal + Q_hat
        - (P2 B_cal + C_cal'P1 D_cal + C0_cal'P2 D0_cal) R2^{-1}
          (B_cal'P2 + D_cal'P1 C_cal + D0_cal'P2 C0_cal) = 0,
    P2(T) = G_hat.

RE3 (mean part for the game, structurally asymmetric: own coefficients
multiply from the matching side, aggregates from the other), with
R3 = D'P1 D_cal + D0'P3 D0_cal + R:
    P3' + P3 A_cal + A'P3 + C'P1 C_cal + C0'P3 C0_cal + (Q - Q Gamma1)
        - (P3 B_cal + C'P1 D_cal + C0'P3 D0_cal) R3^{-1}
          (B'P3 + D'P1 C_cal + D0'P3 C0_cal) = 0,
    P3(T) = G (I - Gamma2).

P3 is not symmetrized; RE1/RE2 are projected onto symmetric matrices
after every step. Integration is classical RK4 with fixed step T/n_t,
marching from T down to 0. RE2 and RE3 need P1 at interior stage times,
so their solvers re-integrate P1 jointly with the mean-part unknown;
this keeps the collapse identity (no couplings, zero Gammas
=> P1 = P2 = P3) exact to roundoff accumulation rather than
interpolation error.

Every solve re-runs itself at half the step and records the max-norm
gap at shared nodes (`step_halving_error`), a cheap a posteriori
certificate of the O(h^4) regime.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import Blowup, GridMismatch, SingularGain
from .model import ProblemSpec, aggregates

__all__ = [
    "EPS_REG_DEFAULT",
    "BLOWUP_GUARD",
    "COND_LIMIT",
    "TimeGrid",
    "RiccatiSolution",
    "RegularityReport",
    "grid_for",
    "solve_re1",
    "solve_re2",
    "solve_re3",
    "regularity",
    "write_trace_csv",
]

EPS_REG_DEFAULT = 1e-6   # uniform positivity margin required of R_op
BLOWUP_GUARD = 1e12      # max-norm guard on the running solution
COND_LIMIT = 1e12        # conditioning cap for gain-operator solves


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k T / n_t, k = 0..n_t."""

    T: float
    n_t: int

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError(f"horizon must be positive, got {self.T}")
        if self.n_t < 2:
            raise ValueError(f"need at least 2 steps, got {self.n_t}")

    @cached_property
    def nodes(self) -> np.ndarray:
        nodes = np.linspace(0.0, self.T, self.n_t + 1)
        nodes.setflags(write=False)
        return nodes

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.n_t * factor)


def grid_for(spec: ProblemSpec) -> TimeGrid:
    """The grid implied by the instance's dims."""
    return TimeGrid(spec.T, spec.n_t)


@dataclass(frozen=True)
class RiccatiSolution:
    """Node values of one Riccati unknown plus its gain operator.

    P has shape (n_t + 1, n, n); R_op is the m x m operator whose inverse
    enters the gain at each node; min_eig is the smallest eigenvalue of
    the symmetrized R_op per node; `regular` certifies
    min_eig >= eps_reg everywhere.
    """

    tag: str                     # 'RE1' | 'RE2' | 'RE3'
    grid: TimeGrid
    P: np.ndarray                # (n_t+1, n, n)
    R_op: np.ndarray             # (n_t+1, m, m)
    min_eig: np.ndarray          # (n_t+1,)
    regular: bool
    eps_reg: float
    step_halving_error: float


@dataclass(frozen=True)
class RegularityReport:
    """Per-node positivity margins of the symmetrized gain operator."""

    tag: str
    eps_reg: float
    min_eig: np.ndarray          # (n_t+1,)
    global_min: float
    passed: bool


def regularity(sol: RiccatiSolution, eps_reg: float = EPS_REG_DEFAULT) -> RegularityReport:
    global_min = float(np.min(sol.min_eig))
    return RegularityReport(
        tag=sol.tag,
        eps_reg=eps_reg,
        min_eig=sol.min_eig,
        global_min=global_min,
        passed=bool(global_min >= eps_reg),
    )


# ---------------------------------------------------------------------------
# gain-operator solves
# ---------------------------------------------------------------------------

def _solve_sym(tag: str, R_op: np.ndarray, rhs: np.ndarray, t: float) -> np.ndarray:
    """X = R_op^{-1} rhs through an eigendecomposition of the symmetric part."""
    sym = 0.5 * (R_op + R_op.T)
    vals, vecs = np.linalg.eigh(sym)
    amin, amax = np.min(np.abs(vals)), np.max(np.abs(vals))
    if amin == 0.0 or amax / amin > COND_LIMIT:
        raise SingularGain(tag, t, float(amin))
    return vecs @ ((vecs.T @ rhs) / vals[:, None])


def _solve_gen(tag: str, R_op: np.ndarray, rhs: np.ndarray, t: float) -> np.ndarray:
    """General (possibly asymmetric) solve with a conditioning guard."""
    svals = np.linalg.svd(R_op, compute_uv=False)
    smin, smax = svals[-1], svals[0]
    if smin == 0.0 or smax / smin > COND_LIMIT:
        raise SingularGain(tag, t, float(smin))
    return np.linalg.solve(R_op, rhs)


def _min_eig_sym(R_op: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (R_op + R_op.T))[0])


# ---------------------------------------------------------------------------
# coefficient table (piecewise constant in time)
# ---------------------------------------------------------------------------

class _Coeffs(NamedTuple):
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    C0: np.ndarray
    D: np.ndarray
    D0: np.ndarray
    A_cal: np.ndarray
    B_cal: np.ndarray
    C_cal: np.ndarray
    C0_cal: np.ndarray
    D_cal: np.ndarray
    D0_cal: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Q_hat: np.ndarray
    Q_track: np.ndarray          # Q - Q Gamma1


class _CoeffTable:
    """All time-dependent matrices resolved per constancy interval."""

    def __init__(self, spec: ProblemSpec):
        ag = aggregates(spec)
        c, w = spec.coeffs, spec.weights
        scheds = (
            c.A, c.B, c.C, c.C0, c.D, c.D0,
            ag.A_cal, ag.B_cal, ag.C_cal, ag.C0_cal, ag.D_cal, ag.D0_cal,
            w.Q, w.R, ag.Q_hat, w.Gamma1,
        )
        starts = np.unique(np.concatenate([np.asarray(s.starts) for s in scheds]))
        rows = []
        for t in starts:
            (A, B, C, C0, D, D0, A_cal, B_cal, C_cal, C0_cal, D_cal, D0_cal,
             Q, R, Q_hat, Gamma1) = (s.at(t) for s in scheds)
            rows.append(_Coeffs(
                A=A, B=B, C=C, C0=C0, D=D, D0=D0,
                A_cal=A_cal, B_cal=B_cal, C_cal=C_cal,
                C0_cal=C0_cal, D_cal=D_cal, D0_cal=D0_cal,
                Q=Q, R=R, Q_hat=Q_hat, Q_track=Q - Q @ Gamma1,
            ))
        self._starts = starts
        self._rows = rows

    def at(self, t: float) -> _Coeffs:
        idx = int(np.searchsorted(self._starts, t, side="right")) - 1
        return self._rows[max(idx, 0)]


# ---------------------------------------------------------------------------
# right-hand sides, written with the literal left/right gain factors
# ---------------------------------------------------------------------------

def _rhs_re1(c: _Coeffs, P1: np.ndarray, t: float) -> np.ndarray:
    R_op = c.D.T @ P1 @ c.D + c.D0.T @ P1 @ c.D0 + c.R
    right = c.B.T @ P1 + c.D.T @ P1 @ c.C + c.D0.T @ P1 @ c.C0
    left = P1 @ c.B + c.C.T @ P1 @ c.D + c.C0.T @ P1 @ c.D0
    lin = P1 @ c.A + c.A.T @ P1 + c.C.T @ P1 @ c.C + c.C0.T @ P1 @ c.C0
    return -(lin - left @ _solve_sym("RE1", R_op, right, t) + c.Q)


def _rhs_re2(c: _Coeffs, P1: np.ndarray, P2: np.ndarray, t: float) -> np.ndarray:
    R_op = c.D_cal.T @ P1 @ c.D_cal + c.D0_cal.T @ P2 @ c.D0_cal + c.R
    right = c.B_cal.T @ P2 + c.D_cal.T @ P1 @ c.C_cal + c.D0_cal.T @ P2 @ c.C0_cal
    left = P2 @ c.B_cal + c.C_cal.T @ P1 @ c.D_cal + c.C0_cal.T @ P2 @ c.D0_cal
    lin = P2 @ c.A_cal + c.A_cal.T @ P2 + c.C_cal.T @ P1 @ c.C_cal + c.C0_cal.T @ P2 @ c.C0_cal
    return -(lin - left @ _solve_sym("RE2", R_op, right, t) + c.Q_hat)


def _rhs_re3(c: _Coeffs, P1: np.ndarray, P3: np.ndarray, t: float) -> np.ndarray:
    R_op = c.D.T @ P1 @ c.D_cal + c.D0.T @ P3 @ c.D0_cal + c.R
    right = c.B.T @ P3 + c.D.T @ P1 @ c.C_cal + c.D0.T @ P3 @ c.C0_cal
    left = P3 @ c.B_cal + c.C.T @ P1 @ c.D_cal + c.C0.T @ P3 @ c.D0_cal
    lin = P3 @ c.A_cal + c.A.T @ P3 + c.C.T @ P1 @ c.C_cal + c.C0.T @ P3 @ c.C0_cal
    return -(lin - left @ _solve_gen("RE3", R_op, right, t) + c.Q_track)


def _node_r_op(tag: str, c: _Coeffs, P1: np.ndarray, P_mean: np.ndarray) -> np.ndarray:
    if tag == "RE1":
        return c.D.T @ P1 @ c.D + c.D0.T @ P1 @ c.D0 + c.R
    if tag == "RE2":
        return c.D_cal.T @ P1 @ c.D_cal + c.D0_cal.T @ P_mean @ c.D0_cal + c.R
    if tag == "RE3":
        return c.D.T @ P1 @ c.D_cal + c.D0.T @ P_mean @ c.D0_cal + c.R
    raise ValueError(f"unknown tag {tag!r}")


# ---------------------------------------------------------------------------
# backward RK4 over a tuple of coupled unknowns
# ---------------------------------------------------------------------------

def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def _backward_rk4(step_rhs, terminals, grid: TimeGrid, symmetrize, table: _CoeffTable):
    """March the coupled system from T to 0.

    step_rhs(c, Ps, t_report) -> list of derivatives. The coefficient row
    ``c`` is resolved once per step from the step's midpoint, so schedule
    breakpoints that align with grid nodes never leak the neighbouring
    piece into a stage (the step then integrates a constant-coefficient
    equation, keeping RK4 at full order). `symmetrize` flags which
    components are projected onto symmetric matrices after each step.
    Returns a list of (n_t+1, n, n) arrays.
    """
    nodes = grid.nodes
    n_comp = len(terminals)
    out = [np.empty((grid.n_t + 1,) + P.shape) for P in terminals]
    Ps = [P.copy() for P in terminals]
    for i in range(n_comp):
        out[i][grid.n_t] = Ps[i]
    h = -grid.dt
    for k in range(grid.n_t - 1, -1, -1):
        t0 = nodes[k]
        c = table.at(0.5 * (t0 + nodes[k + 1]))
        k1 = step_rhs(c, Ps, t0)
        k2 = step_rhs(c, [P + 0.5 * h * dP for P, dP in zip(Ps, k1)], t0)
        k3 = step_rhs(c, [P + 0.5 * h * dP for P, dP in zip(Ps, k2)], t0)
        k4 = step_rhs(c, [P + h * dP for P, dP in zip(Ps, k3)], t0)
        for i in range(n_comp):
            P = Ps[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if symmetrize[i]:
                P = _sym(P)
            norm = float(np.max(np.abs(P)))
            if not np.isfinite(norm) or norm > BLOWUP_GUARD:
                raise Blowup("riccati", t0, norm, BLOWUP_GUARD)
            Ps[i] = P
            out[i][k] = P
    return out


def _finish(tag, spec, grid, P_path, P1_path, eps_reg, certify, resolve):
    """Assemble the solution object: per-node R_op, margins, halving error."""
    table = _CoeffTable(spec)
    nodes = grid.nodes
    m = spec.m
    R_op = np.empty((grid.n_t + 1, m, m))
    min_eig = np.empty(grid.n_t + 1)
    for k, t in enumerate(nodes):
        c = table.at(t)
        R_op[k] = _node_r_op(tag, c, P1_path[k], P_path[k])
        min_eig[k] = _min_eig_sym(R_op[k])

    if certify:
        half = resolve(grid.refined(2))
        err = float(np.max(np.abs(P_path - half[::2])))
    else:
        err = float("nan")

    for arr in (P_path, R_op, min_eig):
        arr.setflags(write=False)
    return RiccatiSolution(
        tag=tag,
        grid=grid,
        P=P_path,
        R_op=R_op,
        min_eig=min_eig,
        regular=bool(np.min(min_eig) >= eps_reg),
        eps_reg=eps_reg,
        step_halving_error=err,
    )


def solve_re1(spec: ProblemSpec, grid: TimeGrid | None = None, *,
              eps_reg: float = EPS_REG_DEFAULT, certify: bool = True) -> RiccatiSolution:
    """Solve the deviation-part equation RE1 backward from P1(T) = G."""
    grid = grid_for(spec) if grid is None else grid
    table = _CoeffTable(spec)

    def step_rhs(c, Ps, t):
        return [_rhs_re1(c, Ps[0], t)]

    def run(g: TimeGrid) -> np.ndarray:
        terminal = _sym(np.asarray(spec.weights.G, dtype=float))
        return _backward_rk4(step_rhs, [terminal], g, (True,), table)[0]

    P1 = run(grid)
    return _finish("RE1", spec, grid, P1, P1, eps_reg, certify, run)


def _solve_mean_part(tag, rhs_mean, terminal_of, symmetrize_mean, spec, grid, p1,
                     eps_reg, certify):
    grid = grid_for(spec) if grid is None else grid
    if p1.tag != "RE1":
        raise ValueError(f"expected an RE1 solution, got {p1.tag!r}")
    if p1.grid != grid:
        raise GridMismatch(
            f"P1 solved on n_t={p1.grid.n_t}, T={p1.grid.T}; "
            f"requested n_t={grid.n_t}, T={grid.T}"
        )
    table = _CoeffTable(spec)

    def step_rhs(c, Ps, t):
        return [_rhs_re1(c, Ps[0], t), rhs_mean(c, Ps[0], Ps[1], t)]

    def run(g: TimeGrid) -> np.ndarray:
        term1 = _sym(np.asarray(spec.weights.G, dtype=float))
        paths = _backward_rk4(step_rhs, [term1, terminal_of(spec)], g,
                              (True, symmetrize_mean), table)
        return paths[1]

    P_mean = run(grid)
    return _finish(tag, spec, grid, P_mean, p1.P, eps_reg, certify, run)


def solve_re2(spec: ProblemSpec, grid: TimeGrid | None = None,
              p1: RiccatiSolution | None = None, *,
              eps_reg: float = EPS_REG_DEFAULT, certify: bool = True) -> RiccatiSolution:
    """Solve the team/control mean-part equation RE2 backward from G_hat.

    P1 enters the coefficients; it is re-integrated jointly so interior
    RK4 stages see consistent values. `p1` must live on the same grid.
    """
    grid = grid_for(spec) if grid is None else grid
    if p1 is None:
        p1 = solve_re1(spec, grid, eps_reg=eps_reg, certify=False)

    def terminal_of(s: ProblemSpec) -> np.ndarray:
        return _sym(np.asarray(aggregates(s).G_hat, dtype=float))

    return _solve_mean_part("RE2", _rhs_re2, terminal_of, True,
                            spec, grid, p1, eps_reg, certify)


def solve_re3(spec: ProblemSpec, grid: TimeGrid | None = None,
              p1: RiccatiSolution | None = None, *,
              eps_reg: float = EPS_REG_DEFAULT, certify: bool = True) -> RiccatiSolution:
    """Solve the game mean-part equation RE3 backward from G(I - Gamma2).

    The unknown is structurally asymmetric and is not symmetrized.
    """
    grid = grid_for(spec) if grid is None else grid
    if p1 is None:
        p1 = solve_re1(spec, grid, eps_reg=eps_reg, certify=False)

    def terminal_of(s: ProblemSpec) -> np.ndarray:
        G = np.asarray(s.weights.G, dtype=float)
        return G @ (np.eye(s.n) - np.asarray(s.weights.Gamma2, dtype=float))

    return _solve_mean_part("RE3", _rhs_re3, terminal_of, False,
                            spec, grid, p1, eps_reg, certify)


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def write_trace_csv(sol: RiccatiSolution, path) -> None:
    """Columns: t, P_11..P_nn (row-major), min_eig_R. 17 significant digits."""
    n = sol.P.shape[1]
    header = ["t"] + [f"P_{i + 1}{j + 1}" for i in range(n) for j in range(n)]
    header.append("min_eig_R")
    fmt = "%.17g"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k, t in enumerate(sol.grid.nodes):
            row = [fmt % t]
            row.extend(fmt % v for v in sol.P[k].reshape(-1))
            row.append(fmt % sol.min_eig[k])
            fh.write(",".join(row) + "\n")
