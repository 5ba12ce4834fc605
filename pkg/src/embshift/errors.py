"""Exception hierarchy. Each category maps to one CLI exit code."""


class EmbshiftError(Exception):
    category = "error"
    exit_code = 1


class UsageError(EmbshiftError, ValueError):
    """Bad arguments or violated preconditions."""

    category = "usage"
    exit_code = 2


class FormatError(EmbshiftError):
    category = "format"
    exit_code = 3


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DigestMismatchError(FormatError):
    pass


class DimensionError(EmbshiftError, ValueError):
    category = "dimension"
    exit_code = 4


class ProviderError(EmbshiftError):
    category = "provider"
    exit_code = 5


class PromptNotFoundError(ProviderError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DivergenceError(EmbshiftError, ArithmeticError):
    """Training blew up. ``report`` carries the partial TrainReport when available."""

    category = "divergence"
    exit_code = 6

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
