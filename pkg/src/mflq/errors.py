"""Exception types shared across the package.

The CLI maps these onto process exit codes: ValidationError -> 2,
SingularGain and RegularityError -> 3, Blowup -> 4.
"""


class ValidationError(ValueError):
    """A candidate problem violates a structural invariant.

    ``field`` names the offending entry so callers can point at it.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class GridMismatch(ValueError):
    """Two objects that must share a time grid do not."""


class SingularGain(ArithmeticError):
    """The gain operator R_op is numerically singular at some node.

    Carries the node time and the smallest absolute eigenvalue found.
    """

    def __init__(self, tag: str, t: float, min_abs_eig: float):
        super().__init__(
            f"{tag}: gain operator singular at t={t:.6g} "
            f"(min |eigenvalue| = {min_abs_eig:.3e})"
        )
        self.tag = tag
        self.t = t
        self.min_abs_eig = min_abs_eig


class RegularityError(ArithmeticError):
    """A solution fails the uniform positivity margin required downstream."""

    def __init__(self, tag: str, min_eig: float, eps_reg: float):
        super().__init__(
            f"{tag}: min eigenvalue of gain operator {min_eig:.3e} "
            f"falls below the required margin {eps_reg:.3e}"
        )
        self.tag = tag
        self.min_eig = min_eig
        self.eps_reg = eps_reg


class Blowup(ArithmeticError):
    """A trajectory or Riccati solution left the admissible range."""

    def __init__(self, what: str, t: float, norm: float, limit: float):
        super().__init__(
            f"{what}: max-norm {norm:.3e} exceeded guard {limit:.3e} at t={t:.6g}"
        )
        self.what = what
        self.t = t
        self.norm = norm
        self.limit = limit
