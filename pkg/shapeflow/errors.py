"""
Error taxonomy for shapeflow.

Input errors map to CLI exit code 4, numerical failures to exit code 3.
Every error carries a ``details`` dict that the CLI serializes to stderr.
"""

from typing import Any, Dict, Optional


class ShapeflowError(Exception):
    """Base class for all shapeflow errors."""

    exit_code = 4

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = dict(details or {})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "message": self.message,
            "details": self.details,
        }


# =======================
# Input Errors (exit 4)
# =======================

class InputError(ShapeflowError):
    exit_code = 4


class ZeroMass(InputError):
    pass


class EmptySupport(InputError):
    pass


class InvalidShape(InputError):
    pass


class ResolutionTooCoarse(InputError):
    pass


class ResolutionMismatch(InputError):
    pass


class MassMismatch(InputError):
    def __init__(self, mass_a: float, mass_b: float):
        super().__init__(
            f"Measures have different masses: {mass_a!r} vs {mass_b!r}",
            {"mass_a": mass_a, "mass_b": mass_b},
        )


class SizeGuardExceeded(InputError):
    pass


class TangencyViolated(InputError):
    pass


class QuadratureMismatch(InputError):
    pass


class ChainBroken(InputError):
    def __init__(self, k: int, gap: float):
        super().__init__(
            f"Chain condition broken between segments {k} and {k + 1}: d_W gap {gap:.3e}",
            {"k": k, "gap": gap},
        )


class DegenerateNeighborhood(InputError):
    pass


class ConfigError(InputError):
    pass


# =======================
# Numerical Failures (exit 3)
# =======================

class NumericalError(ShapeflowError):
    exit_code = 3


class NonConvergence(NumericalError):
    def __init__(self, iterations: int, residual: float, message: str = ""):
        super().__init__(
            message or f"Iteration did not converge after {iterations} steps (residual {residual:.3e})",
            {"iterations": iterations, "residual": residual},
        )


class NoConvergence(NumericalError):
    def __init__(self, residual: float, message: str = ""):
        super().__init__(
            message or f"Boundary value solve did not converge (residual {residual:.3e})",
            {"residual": residual},
        )


class BlowupGuard(NumericalError):
    pass


class StallError(NumericalError):
    pass
