"""Linear-quadratic mean-field control, team and game problems.

Solve the three coupled Riccati equations of a weakly coupled
linear-quadratic population, synthesize the decentralized feedback laws
for the control/team and game solution concepts, and compare them by
Monte Carlo simulation of the finite population against its mean-field
limit.

Typical use::

    from mflq import benchmark_problem, solve_re1, solve_re2, synthesize_mc_mt

    spec = benchmark_problem()
    p1 = solve_re1(spec)
    p2 = solve_re2(spec, p1=p1)
    law = synthesize_mc_mt(spec, p1, p2)
"""

from .analysis import (
    ConvergenceReport,
    OrderingEntry,
    OrderingReport,
    PerturbationReport,
    benchmark_report,
    convergence_study,
    ordering_check,
    perturbation_optimality,
)
from .benchmark import benchmark_problem, special_variant
from .errors import (
    Blowup,
    GridMismatch,
    RegularityError,
    SingularGain,
    ValidationError,
)
from .model import (
    CoefficientSet,
    Dimensions,
    MatrixSchedule,
    ProblemSpec,
    SpecialCaseReport,
    WeightSet,
    aggregates,
    build_problem,
    load_problem,
    problem_from_dict,
    special_case_predicate,
    validate_spec,
    with_gammas,
    without_bar_coefficients,
)
from .riccati import (
    RegularityReport,
    RiccatiSolution,
    TimeGrid,
    grid_for,
    regularity,
    solve_re1,
    solve_re2,
    solve_re3,
    write_trace_csv,
)
from .simulate import (
    CostEstimate,
    LimitTrajectory,
    MeanProcessPath,
    NoiseBundle,
    PopulationTrajectory,
    estimate_cost_limit,
    estimate_cost_population,
    limit_costs,
    mc_value,
    population_costs,
    simulate_limit,
    simulate_mean_process,
    simulate_population,
)
from .strategy import (
    ClosedLoopCoefficients,
    EquivalenceReport,
    FeedbackLaw,
    closed_loop,
    equivalence_check,
    synthesize_mc_mt,
    synthesize_mg,
    write_gains_csv,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # model
    "MatrixSchedule", "Dimensions", "CoefficientSet", "WeightSet", "ProblemSpec",
    "SpecialCaseReport", "validate_spec", "aggregates", "special_case_predicate",
    "build_problem", "problem_from_dict", "load_problem",
    "without_bar_coefficients", "with_gammas",
    # benchmark
    "benchmark_problem", "special_variant",
    # errors
    "ValidationError", "GridMismatch", "SingularGain", "RegularityError", "Blowup",
    # riccati
    "TimeGrid", "grid_for", "RiccatiSolution", "RegularityReport",
    "solve_re1", "solve_re2", "solve_re3", "regularity", "write_trace_csv",
    # strategy
    "FeedbackLaw", "ClosedLoopCoefficients", "EquivalenceReport",
    "synthesize_mc_mt", "synthesize_mg", "closed_loop", "equivalence_check",
    "write_gains_csv",
    # simulate
    "NoiseBundle", "MeanProcessPath", "PopulationTrajectory", "LimitTrajectory",
    "CostEstimate", "simulate_mean_process", "simulate_population", "simulate_limit",
    "population_costs", "limit_costs", "estimate_cost_population",
    "estimate_cost_limit", "mc_value",
    # analysis
    "ConvergenceReport", "OrderingEntry", "OrderingReport", "PerturbationReport",
    "convergence_study", "ordering_check", "perturbation_optimality",
    "benchmark_report",
]
