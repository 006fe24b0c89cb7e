"""Problem model for linear-quadratic mean-field decision instances.

An instance couples many exchangeable agents through empirical averages.
Each agent's state follows

    dx_i = (A x_i + A_bar xN + B u_i + B_bar uN) dt
         + (C x_i + C_bar xN + D u_i + D_bar uN) dW_i
         + (C0 x_i + C0_bar xN + D0 u_i + D0_bar uN) dW_0,

where xN and uN are the population averages, W_i is the agent's own noise
and W_0 is a noise common to everyone. The individual cost tracks scaled
averages:

    J_i = 1/2 E{ int_0^T |x_i - Gamma1 xN|_Q^2 + |u_i|_R^2 dt
                 + |x_i(T) - Gamma2 xN(T)|_G^2 }.

Q, R, G may be indefinite. Time-varying entries are piecewise-constant
matrix schedules on [0, T].

This module holds the validated containers plus derived views used by the
mean-part equations: aggregate coefficients (own + coupling sums), the
congruence-transformed weights Q_hat = (I-Gamma1)' Q (I-Gamma1) and
G_hat = (I-Gamma2)' G (I-Gamma2), and the structural predicate deciding
when the game-consistent synthesis coincides with the team/control one.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError

__all__ = [
    "SYMMETRY_TOL",
    "SPECIAL_CASE_TOL",
    "MatrixSchedule",
    "Dimensions",
    "CoefficientSet",
    "WeightSet",
    "ProblemSpec",
    "AggregateView",
    "SpecialCaseReport",
    "validate_spec",
    "aggregates",
    "special_case_predicate",
    "build_problem",
    "problem_from_dict",
    "load_problem",
    "without_bar_coefficients",
    "with_gammas",
]

# Relative Frobenius tolerance under which a weight matrix is silently
# symmetrized; larger asymmetry is rejected.
SYMMETRY_TOL = 1e-10

# Absolute max-norm tolerance for the structural special-case residuals.
SPECIAL_CASE_TOL = 1e-12

_COEFF_NAMES = (
    "A", "A_bar", "C", "C_bar", "C0", "C0_bar",
    "B", "B_bar", "D", "D_bar", "D0", "D0_bar",
)
_SQUARE_COEFFS = frozenset({"A", "A_bar", "C", "C_bar", "C0", "C0_bar"})


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MatrixSchedule:
    """Piecewise-constant matrix function of time.

    ``starts`` holds the left endpoints of the constancy intervals in
    strictly increasing order starting at 0; ``values[i]`` applies on
    [starts[i], starts[i+1]) and the last piece extends to the horizon,
    so evaluation at T returns the final piece.
    """

    starts: np.ndarray  # (k,)
    values: np.ndarray  # (k, rows, cols)

    @staticmethod
    def constant(matrix) -> "MatrixSchedule":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2:
            raise ValidationError("schedule", "a constant piece must be a 2-d matrix")
        return MatrixSchedule(_readonly(np.zeros(1)), _readonly(matrix[None]))

    @property
    def shape(self) -> tuple:
        return self.values.shape[1:]

    @property
    def n_pieces(self) -> int:
        return len(self.starts)

    def is_constant(self) -> bool:
        return len(self.starts) == 1

    def at(self, t: float) -> np.ndarray:
        idx = int(np.searchsorted(self.starts, t, side="right")) - 1
        return self.values[max(idx, 0)]

    def at_many(self, times) -> np.ndarray:
        idx = np.searchsorted(self.starts, np.asarray(times, dtype=float), side="right") - 1
        return self.values[np.maximum(idx, 0)]


def _as_schedule(name: str, value, rows: int, cols: int) -> MatrixSchedule:
    """Coerce ``value`` (None | matrix | [(t, matrix), ...] | MatrixSchedule).

    Schedule pieces must be 2-tuples; a plain nested list is a constant.
    """
    if value is None:
        return MatrixSchedule.constant(np.zeros((rows, cols)))
    if isinstance(value, MatrixSchedule):
        return value
    if isinstance(value, (list, tuple)) and len(value) > 0 and isinstance(value[0], tuple):
        try:
            starts = np.array([float(t) for t, _ in value])
            mats = np.stack([np.asarray(mat, dtype=float) for _, mat in value])
        except (TypeError, ValueError) as exc:
            raise ValidationError(name, f"cannot interpret as a schedule: {exc}") from None
        return MatrixSchedule(_readonly(starts), _readonly(mats))
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(name, f"cannot interpret as a matrix: {exc}") from None
    if arr.ndim == 2:
        return MatrixSchedule.constant(arr)
    raise ValidationError(name, "expected a matrix or a list of (t_start, matrix) pieces")


def _merged_starts(schedules) -> np.ndarray:
    return np.unique(np.concatenate([np.asarray(s.starts) for s in schedules]))


def schedule_map(func, *schedules: MatrixSchedule) -> MatrixSchedule:
    """Apply ``func`` pointwise in time over the merged breakpoints."""
    starts = _merged_starts(schedules)
    pieces = np.stack([func(*(s.at(t) for s in schedules)) for t in starts])
    return MatrixSchedule(_readonly(starts), _readonly(pieces))


@dataclass(frozen=True)
class Dimensions:
    """State dimension n, control dimension m, horizon T, Riccati grid size n_t."""

    n: int
    m: int
    T: float
    n_t: int = 1000


@dataclass(frozen=True)
class CoefficientSet:
    """The twelve dynamic coefficient families, each a schedule on [0, T].

    Plain names act on the agent's own state/control; ``_bar`` names act
    on the population averages. A/C/C0 families are n x n, B/D/D0
    families are n x m. C0/D0 load on the common noise.
    """

    A: MatrixSchedule
    A_bar: MatrixSchedule
    C: MatrixSchedule
    C_bar: MatrixSchedule
    C0: MatrixSchedule
    C0_bar: MatrixSchedule
    B: MatrixSchedule
    B_bar: MatrixSchedule
    D: MatrixSchedule
    D_bar: MatrixSchedule
    D0: MatrixSchedule
    D0_bar: MatrixSchedule


@dataclass(frozen=True)
class WeightSet:
    """Cost weights: Q, R schedules (symmetric, possibly indefinite),
    terminal G, and the average-tracking scalings Gamma1 (schedule), Gamma2."""

    Q: MatrixSchedule
    R: MatrixSchedule
    G: np.ndarray
    Gamma1: MatrixSchedule
    Gamma2: np.ndarray


@dataclass(frozen=True)
class ProblemSpec:
    """A fully validated problem instance. Treat as immutable."""

    dims: Dimensions
    coeffs: CoefficientSet
    weights: WeightSet
    x0: np.ndarray

    @property
    def n(self) -> int:
        return self.dims.n

    @property
    def m(self) -> int:
        return self.dims.m

    @property
    def T(self) -> float:
        return self.dims.T

    @property
    def n_t(self) -> int:
        return self.dims.n_t


@dataclass(frozen=True)
class AggregateView:
    """Aggregate (own + coupling) coefficients and transformed weights.

    These drive the mean-part dynamics and equations: for any admissible
    feedback the conditional mean evolves with A_cal = A + A_bar,
    B_cal = B + B_bar, and the common-noise pair C0_cal, D0_cal; the
    mean-part costs use Q_hat and G_hat.
    """

    A_cal: MatrixSchedule
    B_cal: MatrixSchedule
    C_cal: MatrixSchedule
    D_cal: MatrixSchedule
    C0_cal: MatrixSchedule
    D0_cal: MatrixSchedule
    Q_hat: MatrixSchedule
    G_hat: np.ndarray


@dataclass(frozen=True)
class SpecialCaseReport:
    """Residuals of the structural conditions under which the game law
    coincides with the team/control law, and the resulting verdict."""

    is_special: bool
    tol: float
    residuals: dict


def _check_schedule(name: str, sched: MatrixSchedule, rows: int, cols: int, T: float):
    starts = np.asarray(sched.starts, dtype=float)
    values = np.asarray(sched.values, dtype=float)
    if starts.ndim != 1 or values.ndim != 3 or len(starts) != len(values):
        raise ValidationError(name, "schedule must pair k start times with k matrices")
    if len(starts) == 0:
        raise ValidationError(name, "schedule must contain at least one piece")
    if starts[0] != 0.0:
        raise ValidationError(name, f"first piece must start at 0, got {starts[0]}")
    if np.any(np.diff(starts) <= 0):
        raise ValidationError(name, "piece start times must be strictly increasing")
    if starts[-1] >= T:
        raise ValidationError(name, f"last piece starts at {starts[-1]}, beyond the horizon T={T}")
    if values.shape[1:] != (rows, cols):
        raise ValidationError(
            name, f"pieces have shape {values.shape[1:]}, expected ({rows}, {cols})"
        )
    if not np.all(np.isfinite(values)):
        raise ValidationError(name, "pieces contain non-finite entries")


def _symmetrized(name: str, sched: MatrixSchedule, tol: float) -> MatrixSchedule:
    """Symmetrize every piece; reject asymmetry beyond ``tol`` (relative Frobenius)."""
    vals = np.asarray(sched.values)
    sym = 0.5 * (vals + np.transpose(vals, (0, 2, 1)))
    gap = np.linalg.norm(vals - np.transpose(vals, (0, 2, 1)), axis=(1, 2))
    scale = np.maximum(np.linalg.norm(vals, axis=(1, 2)), 1.0)
    worst = float(np.max(gap / scale))
    if worst > tol:
        raise ValidationError(
            name, f"matrix is asymmetric (relative Frobenius gap {worst:.3e} > {tol:.1e})"
        )
    return MatrixSchedule(_readonly(sched.starts), _readonly(sym))


def validate_spec(candidate: ProblemSpec, *, sym_tol: float = SYMMETRY_TOL) -> ProblemSpec:
    """Check every structural invariant and return a canonical instance.

    Weight matrices within ``sym_tol`` of symmetric are replaced by their
    symmetric parts; larger asymmetry raises ValidationError. All arrays
    in the returned spec are read-only.
    """
    dims = candidate.dims
    if not isinstance(dims.n, int) or dims.n < 1:
        raise ValidationError("dims.n", f"state dimension must be a positive integer, got {dims.n!r}")
    if not isinstance(dims.m, int) or dims.m < 1:
        raise ValidationError("dims.m", f"control dimension must be a positive integer, got {dims.m!r}")
    T = float(dims.T)
    if not np.isfinite(T) or T <= 0:
        raise ValidationError("dims.T", f"horizon must be positive and finite, got {dims.T!r}")
    if not isinstance(dims.n_t, int) or dims.n_t < 2:
        raise ValidationError("dims.n_t", f"grid size must be an integer >= 2, got {dims.n_t!r}")
    n, m = dims.n, dims.m

    coeffs = {}
    for name in _COEFF_NAMES:
        cols = n if name in _SQUARE_COEFFS else m
        sched = getattr(candidate.coeffs, name)
        _check_schedule(f"coeffs.{name}", sched, n, cols, T)
        coeffs[name] = MatrixSchedule(_readonly(sched.starts), _readonly(sched.values))

    w = candidate.weights
    _check_schedule("weights.Q", w.Q, n, n, T)
    _check_schedule("weights.R", w.R, m, m, T)
    _check_schedule("weights.Gamma1", w.Gamma1, n, n, T)
    Q = _symmetrized("weights.Q", w.Q, sym_tol)
    R = _symmetrized("weights.R", w.R, sym_tol)
    Gamma1 = MatrixSchedule(_readonly(w.Gamma1.starts), _readonly(w.Gamma1.values))

    G = np.asarray(w.G, dtype=float)
    if G.shape != (n, n):
        raise ValidationError("weights.G", f"shape {G.shape}, expected ({n}, {n})")
    if not np.all(np.isfinite(G)):
        raise ValidationError("weights.G", "contains non-finite entries")
    gap = np.linalg.norm(G - G.T)
    if gap > sym_tol * max(np.linalg.norm(G), 1.0):
        raise ValidationError("weights.G", f"matrix is asymmetric (gap {gap:.3e})")
    G = _readonly(0.5 * (G + G.T))

    Gamma2 = np.asarray(w.Gamma2, dtype=float)
    if Gamma2.shape != (n, n):
        raise ValidationError("weights.Gamma2", f"shape {Gamma2.shape}, expected ({n}, {n})")
    if not np.all(np.isfinite(Gamma2)):
        raise ValidationError("weights.Gamma2", "contains non-finite entries")
    Gamma2 = _readonly(Gamma2)

    x0 = np.asarray(candidate.x0, dtype=float).reshape(-1)
    if x0.shape != (n,):
        raise ValidationError("x0", f"length {x0.shape[0]}, expected {n}")
    if not np.all(np.isfinite(x0)):
        raise ValidationError("x0", "contains non-finite entries")

    return ProblemSpec(
        dims=Dimensions(n=n, m=m, T=T, n_t=dims.n_t),
        coeffs=CoefficientSet(**coeffs),
        weights=WeightSet(Q=Q, R=R, G=G, Gamma1=Gamma1, Gamma2=Gamma2),
        x0=_readonly(x0),
    )


def aggregates(spec: ProblemSpec) -> AggregateView:
    """Aggregate coefficients and congruence-transformed weights.

    Q_hat and G_hat are forced exactly symmetric (the congruence of a
    symmetric matrix is symmetric; float products can miss by an ulp).
    """
    c, w = spec.coeffs, spec.weights
    add = lambda x, y: x + y
    n = spec.n
    eye = np.eye(n)

    def q_hat(Q, Gamma1):
        X = eye - Gamma1
        M = X.T @ Q @ X
        return 0.5 * (M + M.T)

    Xg = eye - spec.weights.Gamma2
    G_hat = Xg.T @ w.G @ Xg
    G_hat = 0.5 * (G_hat + G_hat.T)
    return AggregateView(
        A_cal=schedule_map(add, c.A, c.A_bar),
        B_cal=schedule_map(add, c.B, c.B_bar),
        C_cal=schedule_map(add, c.C, c.C_bar),
        D_cal=schedule_map(add, c.D, c.D_bar),
        C0_cal=schedule_map(add, c.C0, c.C0_bar),
        D0_cal=schedule_map(add, c.D0, c.D0_bar),
        Q_hat=schedule_map(q_hat, w.Q, w.Gamma1),
        G_hat=_readonly(G_hat),
    )


def special_case_predicate(spec: ProblemSpec, tol: float = SPECIAL_CASE_TOL) -> SpecialCaseReport:
    """Decide whether the game law structurally collapses onto the
    team/control law.

    True iff every coupling (bar) coefficient vanishes and the weight
    scalings satisfy Gamma1' Q = Gamma1' Q Gamma1 (at all schedule nodes)
    and Gamma2' G = Gamma2' G Gamma2, each within ``tol`` in max-norm.
    Gamma = I and Gamma = 0 are the canonical examples.
    """
    c, w = spec.coeffs, spec.weights
    residuals = {}
    for name in ("A_bar", "C_bar", "C0_bar", "B_bar", "D_bar", "D0_bar"):
        residuals[name] = float(np.max(np.abs(getattr(c, name).values)))

    def g1_res(Q, Gamma1):
        M = Gamma1.T @ Q
        return M - M @ Gamma1

    g1 = schedule_map(g1_res, w.Q, w.Gamma1)
    residuals["gamma1_weight"] = float(np.max(np.abs(g1.values)))
    M2 = w.Gamma2.T @ spec.weights.G
    residuals["gamma2_weight"] = float(np.max(np.abs(M2 - M2 @ w.Gamma2)))

    return SpecialCaseReport(
        is_special=all(r <= tol for r in residuals.values()),
        tol=tol,
        residuals=residuals,
    )


def build_problem(
    n: int,
    m: int,
    T: float,
    x0,
    *,
    n_t: int = 1000,
    A=None, A_bar=None, B=None, B_bar=None,
    C=None, C_bar=None, C0=None, C0_bar=None,
    D=None, D_bar=None, D0=None, D0_bar=None,
    Q=None, R=None, G=None, Gamma1=None, Gamma2=None,
) -> ProblemSpec:
    """Convenience constructor: omitted entries default to zero.

    Each coefficient/weight accepts a constant matrix, a list of
    (t_start, matrix) pieces, or a ready MatrixSchedule.
    """
    if not isinstance(n, int) or n < 1:
        raise ValidationError("dims.n", f"state dimension must be a positive integer, got {n!r}")
    if not isinstance(m, int) or m < 1:
        raise ValidationError("dims.m", f"control dimension must be a positive integer, got {m!r}")
    coeffs = CoefficientSet(
        A=_as_schedule("coeffs.A", A, n, n),
        A_bar=_as_schedule("coeffs.A_bar", A_bar, n, n),
        C=_as_schedule("coeffs.C", C, n, n),
        C_bar=_as_schedule("coeffs.C_bar", C_bar, n, n),
        C0=_as_schedule("coeffs.C0", C0, n, n),
        C0_bar=_as_schedule("coeffs.C0_bar", C0_bar, n, n),
        B=_as_schedule("coeffs.B", B, n, m),
        B_bar=_as_schedule("coeffs.B_bar", B_bar, n, m),
        D=_as_schedule("coeffs.D", D, n, m),
        D_bar=_as_schedule("coeffs.D_bar", D_bar, n, m),
        D0=_as_schedule("coeffs.D0", D0, n, m),
        D0_bar=_as_schedule("coeffs.D0_bar", D0_bar, n, m),
    )
    weights = WeightSet(
        Q=_as_schedule("weights.Q", Q, n, n),
        R=_as_schedule("weights.R", R, m, m),
        G=np.zeros((n, n)) if G is None else np.asarray(G, dtype=float),
        Gamma1=_as_schedule("weights.Gamma1", Gamma1, n, n),
        Gamma2=np.zeros((n, n)) if Gamma2 is None else np.asarray(Gamma2, dtype=float),
    )
    candidate = ProblemSpec(
        dims=Dimensions(n=n, m=m, T=float(T), n_t=n_t),
        coeffs=coeffs,
        weights=weights,
        x0=np.asarray(x0, dtype=float),
    )
    return validate_spec(candidate)


def without_bar_coefficients(spec: ProblemSpec) -> ProblemSpec:
    """The same instance with every coupling (bar) coefficient set to zero."""
    c = spec.coeffs
    zeros = {
        name: MatrixSchedule.constant(np.zeros(getattr(c, name).shape))
        for name in _COEFF_NAMES
        if name.endswith("_bar")
    }
    return validate_spec(replace(spec, coeffs=replace(c, **zeros)))


def with_gammas(spec: ProblemSpec, gamma1, gamma2) -> ProblemSpec:
    """The same instance with both average-tracking scalings replaced."""
    n = spec.n
    w = replace(
        spec.weights,
        Gamma1=_as_schedule("weights.Gamma1", np.asarray(gamma1, dtype=float), n, n),
        Gamma2=np.asarray(gamma2, dtype=float),
    )
    return validate_spec(replace(spec, weights=w))


# ---------------------------------------------------------------------------
# JSON problem files
# ---------------------------------------------------------------------------

_DIMS_KEYS = {"n", "m", "T", "n_t"}
_WEIGHT_KEYS = ("Q", "R", "G", "Gamma1", "Gamma2")


def _entry_to_schedule(field: str, entry, rows: int, cols: int) -> MatrixSchedule:
    """JSON encoding: a nested array is a constant; a list of
    {"t_start": float, "matrix": [[...]]} objects is a schedule."""
    if isinstance(entry, list) and entry and isinstance(entry[0], dict):
        pieces = []
        for i, piece in enumerate(entry):
            unknown = set(piece) - {"t_start", "matrix"}
            if unknown:
                raise ValidationError(field, f"piece {i} has unknown keys {sorted(unknown)}")
            if "t_start" not in piece or "matrix" not in piece:
                raise ValidationError(field, f"piece {i} needs both 't_start' and 'matrix'")
            pieces.append((piece["t_start"], piece["matrix"]))
        return _as_schedule(field, pieces, rows, cols)
    return _as_schedule(field, entry, rows, cols)


def problem_from_dict(data: dict) -> ProblemSpec:
    """Parse the JSON problem encoding. Unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ValidationError("problem", "top level must be an object")
    unknown = set(data) - {"dims", "x0", "coeffs", "weights"}
    if unknown:
        raise ValidationError("problem", f"unknown top-level keys {sorted(unknown)}")
    for key in ("dims", "x0", "weights"):
        if key not in data:
            raise ValidationError(key, "missing required section")

    dims_raw = data["dims"]
    unknown = set(dims_raw) - _DIMS_KEYS
    if unknown:
        raise ValidationError("dims", f"unknown keys {sorted(unknown)}")
    missing = {"n", "m", "T"} - set(dims_raw)
    if missing:
        raise ValidationError("dims", f"missing keys {sorted(missing)}")
    try:
        n = int(dims_raw["n"])
        m = int(dims_raw["m"])
    except (TypeError, ValueError):
        raise ValidationError("dims", "n and m must be integers") from None
    T = dims_raw["T"]
    n_t = int(dims_raw.get("n_t", 1000))

    coeffs_raw = data.get("coeffs", {})
    unknown = set(coeffs_raw) - set(_COEFF_NAMES)
    if unknown:
        raise ValidationError("coeffs", f"unknown keys {sorted(unknown)}")
    coeff_args = {}
    for name in _COEFF_NAMES:
        if name in coeffs_raw:
            cols = n if name in _SQUARE_COEFFS else m
            coeff_args[name] = _entry_to_schedule(f"coeffs.{name}", coeffs_raw[name], n, cols)

    weights_raw = data["weights"]
    unknown = set(weights_raw) - set(_WEIGHT_KEYS)
    if unknown:
        raise ValidationError("weights", f"unknown keys {sorted(unknown)}")
    missing = set(_WEIGHT_KEYS) - set(weights_raw)
    if missing:
        raise ValidationError("weights", f"missing keys {sorted(missing)}")
    for name in ("G", "Gamma2"):
        try:
            arr = np.asarray(weights_raw[name], dtype=float)
        except (TypeError, ValueError):
            raise ValidationError(f"weights.{name}", "must be a constant matrix") from None
        if arr.ndim != 2:
            raise ValidationError(f"weights.{name}", "must be a constant matrix")

    return build_problem(
        n, m, T, data["x0"],
        n_t=n_t,
        Q=_entry_to_schedule("weights.Q", weights_raw["Q"], n, n),
        R=_entry_to_schedule("weights.R", weights_raw["R"], m, m),
        G=weights_raw["G"],
        Gamma1=_entry_to_schedule("weights.Gamma1", weights_raw["Gamma1"], n, n),
        Gamma2=weights_raw["Gamma2"],
        **coeff_args,
    )


def load_problem(path) -> ProblemSpec:
    """Load and validate a JSON problem file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError("problem", f"invalid JSON: {exc}") from None
    return problem_from_dict(data)
