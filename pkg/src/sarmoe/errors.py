"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: contract/format/input problems exit 2,
numerical failures exit 3.
"""


class SarmoeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SarmoeError):
    """An operand violates a documented precondition (bad pixel, bad spec)."""


class RasterFormatError(SarmoeError):
    """Malformed or unrecognized file header / payload encoding."""


class DimensionMismatchError(SarmoeError):
    """Declared dimensions disagree with the actual payload or operand."""


class ContractViolationError(SarmoeError):
    """Caller broke an API contract (shape, class count, pairing...)."""


class NumericalFailureError(SarmoeError):
    """Non-finite values appeared where finite arithmetic was required."""


class EmptyReportError(SarmoeError):
    """A metric report would contain no defined entries."""
