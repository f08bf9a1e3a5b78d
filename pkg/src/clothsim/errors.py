"""Exception types raised across the package."""


class ClothSimError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(ClothSimError):
    """Operands have incompatible shapes."""


class NotPositiveDefinite(ClothSimError):
    """A nonpositive pivot was encountered while factorizing an SPD matrix."""


class SingularMatrix(ClothSimError):
    """Pivoting failed: the matrix is singular to working precision."""


class ParseError(ClothSimError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateTriangle(ClothSimError):
    """A triangle has (numerically) zero rest area."""


class NonManifoldEdge(ClothSimError):
    """An edge is shared by more than two triangles."""


class DegenerateEdge(ClothSimError):
    """A rescaling projection was requested for a near-zero vector."""


class SlipWithZeroTangent(ClothSimError):
    """Slip-case derivative requested where the tangential direction is undefined."""


class DegenerateContactJacobian(ClothSimError):
    """A per-contact block is rank-deficient beyond its analytic rank."""


class SingularAdjointSystem(ClothSimError):
    """The direct fallback failed on the adjoint system matrix."""


class NonFiniteObjective(ClothSimError):
    """The objective returned NaN or infinity."""


class ConfigError(ClothSimError):
    """Scene configuration failed validation; message names the field path."""
