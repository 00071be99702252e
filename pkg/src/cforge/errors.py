"""Exception hierarchy shared by all modules.

Every error carries an ``exit_code`` used by the command line driver:
2 for configuration problems, 3 for violated preconditions, 4 for numeric
failures and 5 for strict-mode violations.
"""


class CForgeError(Exception):
    """Base class for all package errors."""

    exit_code = 4


class ConfigError(CForgeError):
    exit_code = 2


class PreconditionError(CForgeError, ValueError):
    exit_code = 3


class InvalidDimensionError(PreconditionError):
    pass


class DimensionMismatchError(PreconditionError):
    pass


class NyquistError(PreconditionError):
    """A synthesized frequency is not resolved by the grid."""


class KernelOverlapError(PreconditionError):
    """Mollifier radius too large for the periodic box."""


class ProfileRangeError(PreconditionError):
    """Corrugation amplitude outside the tabulated range."""


class CorrugationRangeError(ProfileRangeError):
    pass


class NotShortError(PreconditionError):
    pass


class DeficitTooLargeError(PreconditionError):
    pass


class UnsupportedProjectionError(PreconditionError):
    pass


class NumericFailure(CForgeError, ArithmeticError):
    exit_code = 4


class SingularMapError(NumericFailure):
    pass


class DegenerateImmersionError(NumericFailure):
    pass


class DecompositionFailure(NumericFailure):
    pass


class AmplitudeFloorError(DecompositionFailure):
    pass


class NotIntegrableError(NumericFailure):
    """Periodic primitive requested for a profile with nonzero mean."""


class StrictModeViolation(CForgeError):
    exit_code = 5
