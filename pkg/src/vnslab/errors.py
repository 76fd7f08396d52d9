"""Exception hierarchy.

Validation errors map to CLI exit code 2, numerical failures to exit code 3.
"""


class VNSLabError(Exception):
    """Base class for all package errors."""


class ValidationError(VNSLabError, ValueError):
    """Input, configuration or precondition failure."""


class NumericalError(VNSLabError, RuntimeError):
    """A numerical procedure failed to meet its tolerance."""


class PoissonConvergenceError(NumericalError):
    pass


class DivergenceError(NumericalError):
    """Velocity left the discrete divergence-free set."""


class InversionError(NumericalError):
    """Fixed-point inversion of a flow map did not converge."""


class TailNotControllableError(NumericalError):
    """The velocity tail after the last snapshot cannot be bounded."""


class CoverageError(ValidationError):
    """A requested time lies outside the snapshot series."""


class BudgetViolationError(ValidationError):
    """The gradient budget required by the straightening map is exceeded."""


class MassMismatchError(ValidationError):
    pass


class ScenarioValidationError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass
