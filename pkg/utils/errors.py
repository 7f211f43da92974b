"""
Exception types shared by the solver stages.
"""


class GpeMlcError(Exception):
    """Base class for all solver errors."""


class MeshError(GpeMlcError):
    """Invalid mesh input, non-conforming output or refinement failure."""


class AssemblyError(GpeMlcError):
    """Degenerate element or level mismatch during assembly."""

    def __init__(self, message: str, element: int = None):
        super().__init__(message)
        self.element = element


class MultigridError(GpeMlcError):
    """Dimension mismatch or non-finite data handed to the multigrid solver."""


class MultigridDivergenceError(MultigridError):
    """Residual grew over consecutive V-cycles."""


class EigenSolverError(GpeMlcError):
    """Inner eigensolver failure (indefinite mass, no convergence)."""


class CompositeSpaceError(GpeMlcError):
    """The correction space lost rank even after the conditioning guard."""


class ConfigError(GpeMlcError):
    """Run configuration validation failure for a named field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
