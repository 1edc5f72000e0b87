"""Exception hierarchy shared by every module."""


class LatentLocError(Exception):
    """Base class for all errors raised by latentloc."""


class InvalidArgumentError(LatentLocError, ValueError):
    pass


class FrameError(InvalidArgumentError):
    """A pose was given in the wrong coordinate frame."""


class DimensionError(InvalidArgumentError):
    pass


class DegenerateWeightsError(LatentLocError, ValueError):
    pass


class DegenerateVectorError(LatentLocError, ValueError):
    pass


class InsufficientDataError(LatentLocError, ValueError):
    pass


class NumericError(LatentLocError, ArithmeticError):
    """Non-finite value encountered; ``where`` names the offending parameter or query."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class FormatError(LatentLocError):
    """Malformed file: bad magic, inconsistent header, unparsable row."""


class TruncatedPayloadError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass
