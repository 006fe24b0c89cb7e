"""Shared fixtures: the benchmark problem and its variants, solved once."""

import pytest

from mflq import (
    benchmark_problem,
    solve_re1,
    solve_re2,
    solve_re3,
    special_variant,
    synthesize_mc_mt,
    synthesize_mg,
)


@pytest.fixture(scope="session")
def bench():
    return benchmark_problem()


@pytest.fixture(scope="session")
def bench_sols(bench):
    p1 = solve_re1(bench, certify=False)
    p2 = solve_re2(bench, p1=p1, certify=False)
    p3 = solve_re3(bench, p1=p1, certify=False)
    return p1, p2, p3


@pytest.fixture(scope="session")
def bench_laws(bench, bench_sols):
    p1, p2, p3 = bench_sols
    return synthesize_mc_mt(bench, p1, p2), synthesize_mg(bench, p1, p3)


@pytest.fixture(scope="session")
def special():
    return special_variant()


@pytest.fixture(scope="session")
def special_sols(special):
    p1 = solve_re1(special, certify=False)
    p2 = solve_re2(special, p1=p1, certify=False)
    p3 = solve_re3(special, p1=p1, certify=False)
    return p1, p2, p3


@pytest.fixture(scope="session")
def special_laws(special, special_sols):
    p1, p2, p3 = special_sols
    return synthesize_mc_mt(special, p1, p2), synthesize_mg(special, p1, p3)
