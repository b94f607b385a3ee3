"""Exception types shared across the package.

The CLI maps these onto exit codes (config 2, data 3, numeric 4), so code
below the CLI should raise the most specific type that applies.
"""


class SurformerError(Exception):
    """Base class for all package errors."""


class MeshError(SurformerError, ValueError):
    """Invalid mesh topology or geometry (degenerate faces, bad indices)."""


class DegenerateGeometryError(SurformerError, ValueError):
    """Geometric problem has no well-posed solution (collinear points, parallel rays)."""


class SolverError(SurformerError, RuntimeError):
    """Iterative solver failed to converge.

    Carries ``iterations``, the number of iterations performed before giving up.
    """

    def __init__(self, message: str, iterations: int | None = None):
        super().__init__(message)
        self.iterations = iterations


class ShapeMismatchError(SurformerError, ValueError):
    """Tensor operands have incompatible shapes."""


class NumericError(SurformerError, ArithmeticError):
    """A computation produced non-finite values or otherwise lost numeric validity."""


class ConfigError(SurformerError, ValueError):
    """Invalid run configuration. Message contains the offending config path."""


class DataError(SurformerError, ValueError):
    """Invalid or inconsistent dataset contents."""
