"""Exception hierarchy.

Everything raised on purpose derives from :class:`SvfitError`.  The CLI maps
:class:`NumericalError` subclasses to exit code 3 and every other
:class:`SvfitError` (and ``OSError``) to exit code 2.
"""


class SvfitError(Exception):
    """Base class for all package errors."""


# -- validation ---------------------------------------------------------------

class InvalidInput(SvfitError, ValueError):
    """Malformed or non-finite input data."""


class RankOutOfRange(InvalidInput):
    pass


class DimensionMismatch(InvalidInput):
    pass


class InvalidRatio(InvalidInput):
    pass


class ConfigError(InvalidInput):
    """A run configuration failed validation."""


class MissingTensor(InvalidInput):
    pass


class StaleTrace(SvfitError):
    """A forward trace was reused, or the stack changed since it was recorded."""


# -- numerical ----------------------------------------------------------------

class NumericalError(SvfitError, ArithmeticError):
    pass


class ConvergenceFailure(NumericalError):
    pass


class NonFiniteActivation(NumericalError):
    pass


class NonFiniteGradient(NumericalError):
    pass


class MergeDiscrepancy(NumericalError):
    pass


# -- file formats -------------------------------------------------------------

class FormatError(SvfitError):
    """A file does not follow its declared binary layout."""


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class DuplicateName(FormatError, ValueError):
    pass


class BadFormat(FormatError):
    pass


class UnsupportedMaxval(FormatError):
    pass
