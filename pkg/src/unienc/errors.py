"""Exception taxonomy shared across the package."""


class UniencError(Exception):
    """Base class for all package-specific errors."""


class DomainError(UniencError, ValueError):
    """An argument is outside the mathematical domain of the operation."""


class ContractViolation(UniencError, ValueError):
    """Structurally invalid operands (shape mismatch, bad combination)."""


class InfeasibleLengthError(UniencError, ValueError):
    """The target cannot fit in the frame sequence (CTC trellis too short).

    Deliberately distinct from numerical failures: callers may skip such
    pairs during training but must never mask an arithmetic problem.
    """


class NumericalError(UniencError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable result."""


class CapacityError(UniencError, ValueError):
    """Input exceeds a configured size limit (e.g. positional table)."""


class DataIntegrityError(UniencError, ValueError):
    """On-disk data contradicts itself (manifest vs. file header, ...)."""


class ParseError(UniencError, ValueError):
    """Malformed external file; message carries location information."""


class CheckpointFormatError(ParseError):
    """Malformed checkpoint file."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class UsageError(UniencError, ValueError):
    """Bad CLI flags or configuration keys."""
