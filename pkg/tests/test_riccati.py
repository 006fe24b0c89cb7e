"""Backward Riccati integration: closed-form oracles first, then structure.

Oracle problems (expected values frozen, derived by hand):

* Logistic scalar: n = m = 1, A = C = D = 0, B = R = G = 1, Q = 0.
  The flow equation reduces to dP/dt = P^2 with P(1) = 1, whose backward
  solution is P(t) = 1/(2 - t); hence P(0) = 0.5 exactly.
* Frozen linear: zero dynamics, Q = G = I. The quadratic term vanishes,
  dP/dt = -Q, so P(t) = (1 + T - t) I; at T = 1, P(0) = 2 I exactly.
"""

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mflq import (
    Blowup,
    GridMismatch,
    SingularGain,
    TimeGrid,
    benchmark_problem,
    build_problem,
    grid_for,
    regularity,
    solve_re1,
    solve_re2,
    solve_re3,
    with_gammas,
    without_bar_coefficients,
    write_trace_csv,
)


def logistic_problem(n_t=1000):
    """dP/dt = P^2 backward from P(1) = 1; P(t) = 1/(2 - t)."""
    return build_problem(1, 1, 1.0, [1.0], B=[[1.0]], R=[[1.0]], G=[[1.0]],
                         n_t=n_t)


def frozen_problem(n_t=1000):
    """Zero dynamics, Q = G = I; P(t) = (2 - t) I."""
    return build_problem(2, 1, 1.0, [0.0, 0.0], Q=np.eye(2), R=[[1.0]],
                         G=np.eye(2), n_t=n_t)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

class TestOracles:
    def test_logistic_scalar_value(self):
        sol = solve_re1(logistic_problem(), certify=False)
        assert abs(sol.P[0, 0, 0] - 0.5) <= 1e-8

    def test_logistic_scalar_whole_path(self):
        sol = solve_re1(logistic_problem(), certify=False)
        exact = 1.0 / (2.0 - sol.grid.nodes)
        assert np.max(np.abs(sol.P[:, 0, 0] - exact)) <= 1e-10

    def test_frozen_linear_exact(self):
        sol = solve_re1(frozen_problem(), certify=False)
        expected = 2.0 * np.eye(2)
        assert np.max(np.abs(sol.P[0] - expected)) <= 1e-12

    def test_frozen_linear_whole_path(self):
        sol = solve_re1(frozen_problem(), certify=False)
        for k, t in enumerate(sol.grid.nodes):
            assert np.max(np.abs(sol.P[k] - (2.0 - t) * np.eye(2))) <= 1e-12

    def test_step_halving_order_at_least_three_and_a_half(self):
        errors = []
        sizes = [8, 16, 32, 64]
        for n_t in sizes:
            sol = solve_re1(logistic_problem(n_t=n_t), certify=False)
            errors.append(abs(sol.P[0, 0, 0] - 0.5))
        slope = np.polyfit(np.log(sizes), np.log(errors), 1)[0]
        assert -slope >= 3.5, f"observed convergence order {-slope:.2f}"

    def test_certified_error_estimate(self):
        sol = solve_re1(logistic_problem(n_t=100), certify=True)
        true_err = abs(sol.P[0, 0, 0] - 0.5)
        assert np.isfinite(sol.step_halving_error)
        # the halved-step error estimate must bound the truth to within
        # the usual 1/(2^4 - 1) Richardson factor, give or take
        assert sol.step_halving_error >= true_err / 16.0
        assert sol.step_halving_error <= 10.0 * true_err + 1e-14

    def test_uncertified_estimate_is_nan(self):
        sol = solve_re1(logistic_problem(n_t=16), certify=False)
        assert np.isnan(sol.step_halving_error)

    def test_mean_equation_reduces_to_reweighted_flow(self):
        """With no couplings and no state/control diffusion, the
        mean-flow equation decouples from the deviation solution and is
        the plain flow equation with reweighted costs."""
        g1 = np.array([[0.2, 0.1], [0.0, 0.3]])
        g2 = np.array([[0.5, 0.0], [0.2, 0.1]])
        a = np.array([[0.3, -0.2], [0.1, 0.4]])
        b = np.array([[1.0, 0.0], [0.2, 0.8]])
        q = np.array([[1.0, 0.1], [0.1, 0.5]])
        r = np.eye(2)
        g = np.array([[0.4, 0.0], [0.0, 0.7]])
        spec = build_problem(2, 2, 1.0, [1.0, -1.0], A=a, B=b, Q=q, R=r,
                             G=g, Gamma1=g1, Gamma2=g2, n_t=400)

        p1 = solve_re1(spec, certify=False)
        p2 = solve_re2(spec, p1=p1, certify=False)

        eye = np.eye(2)
        q_hat = (eye - g1).T @ q @ (eye - g1)
        g_hat = (eye - g2).T @ g @ (eye - g2)
        reweighted = build_problem(
            2, 2, 1.0, [1.0, -1.0], A=a, B=b,
            Q=0.5 * (q_hat + q_hat.T), R=r, G=0.5 * (g_hat + g_hat.T),
            n_t=400,
        )
        direct = solve_re1(reweighted, certify=False)
        # not bit-identical (different co-integration pairing), but far
        # below any discretization scale
        assert np.max(np.abs(p2.P - direct.P)) <= 1e-9


# ---------------------------------------------------------------------------
# structural identities
# ---------------------------------------------------------------------------

class TestIdentities:
    def test_collapse_to_single_equation(self, bench):
        """No couplings and no average in the cost: all three equations
        must produce the same path, far below 1e-10."""
        zero = np.zeros((2, 2))
        spec = with_gammas(without_bar_coefficients(bench), zero, zero)
        p1 = solve_re1(spec, certify=False)
        p2 = solve_re2(spec, p1=p1, certify=False)
        p3 = solve_re3(spec, p1=p1, certify=False)
        scale = 1.0 + np.max(np.abs(p1.P))
        assert np.max(np.abs(p1.P - p2.P)) / scale <= 1e-10
        assert np.max(np.abs(p1.P - p3.P)) / scale <= 1e-10

    def test_decoupled_tracking_regime_joins_game_and_team(self, special_sols):
        """No couplings and full-average tracking: the asymmetric
        equation must coincide with the mean-flow equation."""
        _, p2, p3 = special_sols
        assert np.max(np.abs(p2.P - p3.P)) <= 1e-8

    def test_benchmark_mean_equations_differ(self, bench_sols):
        _, p2, p3 = bench_sols
        assert np.max(np.abs(p2.P - p3.P)) > 1e-3

    def test_terminal_conditions_exact(self, bench, bench_sols):
        p1, p2, p3 = bench_sols
        g = bench.weights.G
        g1 = bench.weights.Gamma1.at(0.0)
        g2 = bench.weights.Gamma2
        eye = np.eye(2)
        np.testing.assert_array_equal(p1.P[-1], g)
        g_hat = (eye - g2).T @ g @ (eye - g2)
        np.testing.assert_array_equal(p2.P[-1], 0.5 * (g_hat + g_hat.T))
        np.testing.assert_array_equal(p3.P[-1], g @ (eye - g2))

    def test_symmetry_enforced_exactly(self, bench_sols):
        p1, p2, p3 = bench_sols
        np.testing.assert_array_equal(p1.P, p1.P.transpose(0, 2, 1))
        np.testing.assert_array_equal(p2.P, p2.P.transpose(0, 2, 1))
        # the third equation is genuinely asymmetric
        assert np.max(np.abs(p3.P - p3.P.transpose(0, 2, 1))) > 1e-3

    def test_gain_operators_positive_on_benchmark(self, bench_sols):
        for sol in bench_sols:
            assert np.min(sol.min_eig) > 0.0

    def test_regularity_report(self, bench_sols):
        p1, _, _ = bench_sols
        rep = regularity(p1, eps_reg=1e-6)
        assert rep.passed
        assert rep.global_min == float(np.min(p1.min_eig))
        strict = regularity(p1, eps_reg=10.0)
        assert not strict.passed


# ---------------------------------------------------------------------------
# failure modes
# ---------------------------------------------------------------------------

class TestFailures:
    def test_singular_gain_raises(self):
        spec = build_problem(1, 1, 1.0, [0.0], B=[[1.0]], Q=[[1.0]],
                             R=[[0.0]], n_t=16)
        with pytest.raises(SingularGain):
            solve_re1(spec, certify=False)

    def test_blowup_raises(self):
        # dP/dt = -(4 P + 1) backward over T = 10 grows like e^{40}
        spec = build_problem(1, 1, 10.0, [0.0], C=[[2.0]], Q=[[1.0]],
                             R=[[1.0]], G=[[1.0]], n_t=200)
        with pytest.raises(Blowup):
            solve_re1(spec, certify=False)

    def test_grid_mismatch(self, bench):
        p1 = solve_re1(bench, grid=TimeGrid(bench.T, 100), certify=False)
        with pytest.raises(GridMismatch):
            solve_re2(bench, grid=TimeGrid(bench.T, 200), p1=p1, certify=False)

    def test_mean_solvers_reject_wrong_tag(self, bench):
        p1 = solve_re1(bench, certify=False)
        p2 = solve_re2(bench, p1=p1, certify=False)
        with pytest.raises(ValueError):
            solve_re3(bench, p1=p2, certify=False)


# ---------------------------------------------------------------------------
# grid and trace artifacts
# ---------------------------------------------------------------------------

class TestGridAndTrace:
    def test_grid_nodes(self):
        grid = TimeGrid(2.0, 4)
        np.testing.assert_allclose(grid.nodes, [0.0, 0.5, 1.0, 1.5, 2.0])
        assert grid.dt == 0.5
        refined = grid.refined()
        assert refined.n_t == 8
        np.testing.assert_array_equal(refined.nodes[::2], grid.nodes)

    def test_grid_for(self, bench):
        grid = grid_for(bench)
        assert grid.n_t == bench.n_t
        assert grid.T == bench.T

    def test_trace_csv_round_trip(self, tmp_path, bench_sols):
        p1, _, _ = bench_sols
        path = tmp_path / "trace.csv"
        write_trace_csv(p1, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["t", "P_11", "P_12", "P_21", "P_22", "min_eig_R"]
        assert len(rows) == 1 + bench_sols[0].grid.n_t + 1
        # 17 significant digits round-trip exactly
        assert float(rows[1][1]) == p1.P[0, 0, 0]
        assert float(rows[-1][5]) == p1.min_eig[-1]


# ---------------------------------------------------------------------------
# randomized robustness
# ---------------------------------------------------------------------------

class TestRandomized:
    @given(
        a=st.floats(-1.0, 1.0), b=st.floats(0.5, 1.0),
        c=st.floats(-0.5, 0.5), d=st.floats(0.0, 0.5),
        q=st.floats(0.0, 1.0), r=st.floats(0.5, 2.0), g=st.floats(0.0, 1.0),
    )
    @settings(max_examples=25, deadline=None)
    def test_scalar_solutions_stay_positive_and_symmetric(self, a, b, c, d, q, r, g):
        spec = build_problem(1, 1, 1.0, [1.0], A=[[a]], B=[[b]], C=[[c]],
                             D=[[d]], Q=[[q]], R=[[r]], G=[[g]], n_t=60)
        sol = solve_re1(spec, certify=False)
        np.testing.assert_array_equal(sol.P, sol.P.transpose(0, 2, 1))
        # with nonnegative Q, G the scalar solution stays nonnegative
        assert np.min(sol.P) >= -1e-12
        # and the gain operator stays regular: R_op >= r > 0
        assert np.min(sol.min_eig) >= r - 1e-12

    @given(n_t=st.integers(8, 200))
    @settings(max_examples=20, deadline=None)
    def test_terminal_node_always_exact(self, n_t):
        spec = logistic_problem(n_t=n_t)
        sol = solve_re1(spec, certify=False)
        assert sol.P[-1, 0, 0] == 1.0
