"""Feedback-law synthesis: gain oracles, residual identities, equivalences."""

import csv

import numpy as np
import pytest

import mflq.strategy as strategy_module
from mflq import (
    GridMismatch,
    TimeGrid,
    aggregates,
    benchmark_problem,
    build_problem,
    closed_loop,
    equivalence_check,
    solve_re1,
    solve_re2,
    solve_re3,
    synthesize_mc_mt,
    synthesize_mg,
    write_gains_csv,
)


def logistic_problem(n_t=1000):
    """dP/dt = P^2 backward from P(1) = 1; the deviation gain is -P."""
    return build_problem(1, 1, 1.0, [1.0], B=[[1.0]], R=[[1.0]], G=[[1.0]],
                         n_t=n_t)


def _laws(spec):
    p1 = solve_re1(spec, certify=False)
    p2 = solve_re2(spec, p1=p1, certify=False)
    p3 = solve_re3(spec, p1=p1, certify=False)
    return (synthesize_mc_mt(spec, p1, p2), synthesize_mg(spec, p1, p3),
            (p1, p2, p3))


class TestGainOracles:
    def test_scalar_deviation_gain(self):
        """For the logistic problem the deviation gain is -P(t), so
        -1/(2 - t); at t = 0 exactly -0.5."""
        law, _, _ = _laws(logistic_problem())
        assert abs(law.theta_dev[0, 0, 0] + 0.5) <= 1e-8
        nodes = law.grid.nodes
        exact = -1.0 / (2.0 - nodes)
        assert np.max(np.abs(law.theta_dev[:, 0, 0] - exact)) <= 1e-10

    def test_gain_stability_under_grid_halving(self, bench, bench_laws):
        law_fine, _, _ = _laws(benchmark_problem(n_t=2000))
        coarse, _ = bench_laws
        assert np.max(np.abs(coarse.theta_mean[0] - law_fine.theta_mean[0])) <= 1e-6
        assert np.max(np.abs(coarse.theta_dev[0] - law_fine.theta_dev[0])) <= 1e-6

    def test_deviation_gain_identical_across_laws(self, bench_laws):
        law_mt, law_mg = bench_laws
        np.testing.assert_array_equal(law_mt.theta_dev, law_mg.theta_dev)

    def test_mean_gains_differ_on_benchmark(self, bench_laws):
        law_mt, law_mg = bench_laws
        assert np.max(np.abs(law_mt.theta_mean - law_mg.theta_mean)) > 1e-3
        report = equivalence_check(benchmark_problem(), law_mt, law_mg)
        assert not report.equivalent

    def test_laws_coincide_in_decoupled_tracking_regime(self, special, special_laws):
        law_mt, law_mg = special_laws
        report = equivalence_check(special, law_mt, law_mg, tol=1e-8)
        assert report.equivalent
        assert report.max_diff_mean <= 1e-8
        assert report.max_diff_dev <= 1e-8


class TestGainResiduals:
    """The published gains must satisfy their defining linear systems at
    every node, using the problem coefficients directly."""

    def test_all_three_defining_systems(self, bench, bench_sols, bench_laws):
        p1, p2, p3 = bench_sols
        law_mt, law_mg = bench_laws
        c = bench.coeffs
        ag = aggregates(bench)
        worst = np.zeros(3)
        for k, t in enumerate(p1.grid.nodes):
            A, B = c.A.at(t), c.B.at(t)
            C, D = c.C.at(t), c.D.at(t)
            Bc, Cc, Dc = ag.B_cal.at(t), ag.C_cal.at(t), ag.D_cal.at(t)
            P1, P2, P3 = p1.P[k], p2.P[k], p3.P[k]
            # deviation gain solves R1 theta = -(B'P1 + D'P1 C)
            rhs1 = B.T @ P1 + D.T @ P1 @ C
            worst[0] = max(worst[0], np.max(np.abs(
                p1.R_op[k] @ law_mt.theta_dev[k] + rhs1)))
            # control/team mean gain solves R2 theta = -(Bc'P2 + Dc'P1 Cc)
            rhs2 = Bc.T @ P2 + Dc.T @ P1 @ Cc
            worst[1] = max(worst[1], np.max(np.abs(
                p2.R_op[k] @ law_mt.theta_mean[k] + rhs2)))
            # game mean gain solves R3 theta = -(B'P3 + D'P1 Cc)
            rhs3 = B.T @ P3 + D.T @ P1 @ Cc
            worst[2] = max(worst[2], np.max(np.abs(
                p3.R_op[k] @ law_mg.theta_mean[k] + rhs3)))
        assert np.max(worst) <= 1e-9, worst


class TestInterfaces:
    def test_no_separate_team_synthesis(self):
        """The team law IS the control law; a separate synthesis routine
        must not exist."""
        assert not hasattr(strategy_module, "synthesize_mt")

    def test_gains_at_endpoints_and_interpolation(self, bench_laws):
        law, _ = bench_laws
        T = law.grid.T
        dt = law.grid.dt
        thm, thd = law.gains_at(np.array([0.0]))
        np.testing.assert_array_equal(thm[0], law.theta_mean[0])
        np.testing.assert_array_equal(thd[0], law.theta_dev[0])
        thm, _ = law.gains_at(np.array([T]))
        np.testing.assert_array_equal(thm[0], law.theta_mean[-1])
        # halfway between the first two nodes: arithmetic average
        thm, _ = law.gains_at(np.array([0.5 * dt]))
        np.testing.assert_allclose(
            thm[0], 0.5 * (law.theta_mean[0] + law.theta_mean[1]),
            rtol=0, atol=1e-15,
        )

    def test_gains_at_clamps_outside_horizon(self, bench_laws):
        law, _ = bench_laws
        thm_lo, _ = law.gains_at(np.array([-0.5]))
        thm_hi, _ = law.gains_at(np.array([law.grid.T + 0.5]))
        np.testing.assert_array_equal(thm_lo[0], law.theta_mean[0])
        np.testing.assert_array_equal(thm_hi[0], law.theta_mean[-1])

    def test_synthesis_rejects_wrong_inputs(self, bench, bench_sols):
        p1, p2, p3 = bench_sols
        with pytest.raises(ValueError):
            synthesize_mc_mt(bench, p1, p3)   # needs the mean-flow solution
        with pytest.raises(ValueError):
            synthesize_mg(bench, p1, p2)      # needs the asymmetric solution
        other = solve_re1(bench, grid=TimeGrid(bench.T, 77), certify=False)
        with pytest.raises(GridMismatch):
            synthesize_mc_mt(bench, other, p2)

    def test_closed_loop_coefficients(self, bench, bench_laws):
        law, _ = bench_laws
        cl = closed_loop(bench, law)
        c = bench.coeffs
        ag = aggregates(bench)
        k = 17
        t = law.grid.nodes[k]
        np.testing.assert_allclose(
            cl.dev_drift[k], c.A.at(t) + c.B.at(t) @ law.theta_dev[k],
            rtol=0, atol=0)
        np.testing.assert_allclose(
            cl.mean_drift[k], ag.A_cal.at(t) + ag.B_cal.at(t) @ law.theta_mean[k],
            rtol=0, atol=0)
        np.testing.assert_allclose(
            cl.mean_diff[k], ag.C_cal.at(t) + ag.D_cal.at(t) @ law.theta_mean[k],
            rtol=0, atol=0)

    def test_gains_csv_round_trip(self, tmp_path, bench_laws):
        law, _ = bench_laws
        path = tmp_path / "gains.csv"
        write_gains_csv(law, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:3] == ["t", "theta_mean_11", "theta_mean_12"]
        assert len(rows) == 1 + law.grid.n_t + 1
        assert float(rows[1][1]) == law.theta_mean[0, 0, 0]
        assert float(rows[-1][-1]) == law.theta_dev[-1, 1, 1]
