"""Exception hierarchy shared across the package."""


class PktransferError(Exception):
    """Base class for all package errors."""


class ContractError(PktransferError, ValueError):
    """A documented precondition was violated."""


class DimensionError(ContractError):
    """Array shapes do not conform."""


class TrainingError(PktransferError, RuntimeError):
    """Training hit a non-finite value.

    Carries whatever diagnostics the caller had at hand (parameter name,
    step, bag id) in ``details``.
    """

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class UndefinedMetricError(PktransferError, ValueError):
    """A metric has no defined value (e.g. no comparable pairs)."""


class SingularMatrixError(PktransferError, ValueError):
    """Design matrix is rank deficient."""

    def __init__(self, message, dependent_columns=()):
        super().__init__(message)
        self.dependent_columns = list(dependent_columns)


class ProjectionError(PktransferError, ValueError):
    """Features carry no variance to project."""


class IntegrityError(PktransferError, RuntimeError):
    """Cached or persisted data disagrees with its source."""


class MissingPrerequisiteError(PktransferError, FileNotFoundError):
    """A pipeline step needs the output of an earlier command."""

    def __init__(self, message, command=None):
        super().__init__(message)
        self.command = command


class BagFormatError(PktransferError, ValueError):
    """Base class for bag-file parse errors; ``offset`` is the byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MalformedHeaderError(BagFormatError):
    pass


class TruncatedPayloadError(BagFormatError):
    def __init__(self, message, offset, expected, actual):
        super().__init__(f"{message}: expected {expected} bytes, got {actual}", offset)
        self.expected = expected
        self.actual = actual


class BagDimensionError(BagFormatError, DimensionError):
    pass


class ConfigError(PktransferError, ValueError):
    """An experiment config has unknown keys or invalid values."""
