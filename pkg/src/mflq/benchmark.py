"""Bundled two-dimensional benchmark instance.

A fully coupled instance on [0, 1] with indefinite Q and R (their
smallest eigenvalues are negative, so it sits outside the classical
definite-weight setting while still admitting regular solutions). The
common-noise loadings are zero; couplings enter the drift and the
idiosyncratic diffusion, and the cost tracks scaled population averages
through Gamma1 and Gamma2.

`special_variant` strips every coupling coefficient and sets
Gamma1 = Gamma2 = I, which places the instance in the regime where the
game-consistent synthesis provably coincides with the team/control one.
"""

import numpy as np

from .model import ProblemSpec, build_problem, with_gammas, without_bar_coefficients

__all__ = [
    "X0",
    "WEIGHT_EIGENVALUES",
    "benchmark_problem",
    "special_variant",
]

A = [[0.8903, 0.6517], [0.1961, 0.2188]]
A_BAR = [[0.7686, 0.8326], [0.0016, 0.3391]]
B = [[0.0843, 0.0655], [0.4614, 0.1750]]
B_BAR = [[0.8735, 0.2435], [0.0124, 0.7822]]
C = [[0.1499, 0.8148], [0.1800, 0.7488]]
C_BAR = [[0.2084, 0.0877], [0.6984, 0.8266]]
D = [[0.9436, 0.0908], [0.6800, 0.1038]]
D_BAR = [[0.4319, 0.8377], [0.3086, 0.4565]]
Q = [[-0.0290, 0.3912], [0.3912, 0.0257]]
R = [[-0.1761, 0.0362], [0.0362, 0.5576]]
G = [[0.0940, 0.2564], [0.2564, 0.4806]]
GAMMA1 = [[0.0815, 0.9821], [0.1076, 0.6146]]
GAMMA2 = [[0.2807, 0.3933], [0.0567, 0.1748]]

X0 = np.array([0.1037, 0.8396])

# Reference eigenvalue pairs of the weight matrices, used by the report
# self-check (each weight has one negative eigenvalue by design).
WEIGHT_EIGENVALUES = {
    "Q": (-0.3938, 0.3905),
    "R": (-0.1779, 0.5594),
    "G": (-0.0338, 0.6084),
}


def benchmark_problem(n_t: int = 1000) -> ProblemSpec:
    """The benchmark instance on [0, 1] with the given Riccati grid size."""
    return build_problem(
        2, 2, 1.0, X0,
        n_t=n_t,
        A=A, A_bar=A_BAR, B=B, B_bar=B_BAR,
        C=C, C_bar=C_BAR, D=D, D_bar=D_BAR,
        Q=Q, R=R, G=G, Gamma1=GAMMA1, Gamma2=GAMMA2,
    )


def special_variant(n_t: int = 1000) -> ProblemSpec:
    """Benchmark with couplings removed and Gamma1 = Gamma2 = I.

    In this regime the game and team/control feedback laws coincide and
    their population costs agree up to the mean-field approximation rate.
    """
    eye = np.eye(2)
    return with_gammas(without_bar_coefficients(benchmark_problem(n_t)), eye, eye)
