"""Exception types raised across the package.

Most derive from ``ValueError`` so callers that only care about bad input
can catch the builtin.
"""


class LocencError(Exception):
    """Base class for every error raised by this package."""


class RangeError(LocencError, ValueError):
    pass


class NonFiniteError(LocencError, ValueError):
    pass


class DomainError(LocencError, ValueError):
    pass


class ShapeError(LocencError, ValueError):
    pass


class MissingAuxError(LocencError, ValueError):
    pass


class EmptyDatasetError(LocencError, ValueError):
    pass


class NaNGradError(LocencError, FloatingPointError):
    pass


class SchemaError(LocencError, ValueError):
    pass


class ParseError(LocencError, ValueError):
    pass


class DegenerateDatasetError(LocencError, ValueError):
    pass


class JoinError(LocencError, KeyError):
    def __str__(self):
        # KeyError quotes its message; keep it readable
        return str(self.args[0]) if self.args else ""


class TooFewPointsError(LocencError, ValueError):
    pass


class ZeroVarianceError(LocencError, ValueError):
    pass


class NoLowPerfError(LocencError, ValueError):
    pass
