"""Exception hierarchy shared across the package.

Exit-code mapping (used by the CLI): ConfigError -> 2, DependencyError -> 3,
NumericalError -> 4. Everything else is an ordinary crash.
"""


class CodexError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CodexError):
    """Invalid configuration: bad value, unknown key, violated invariant."""

    exit_code = 2


class DependencyError(CodexError):
    """A required upstream artifact (dataset, checkpoint) is missing or incompatible."""

    exit_code = 3


class NumericalError(CodexError):
    """Non-finite values or numerical divergence during training/evaluation."""

    exit_code = 4


class DataFormatError(CodexError):
    """On-disk data does not match the expected schema."""

    exit_code = 2
