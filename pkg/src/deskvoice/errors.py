"""Shared exception types.

Every module raises from this small taxonomy so callers (and the CLI exit-code
mapping) can tell usage mistakes from runtime failures.
"""


class DeskvoiceError(Exception):
    """Base class for all library errors."""


class DimensionError(DeskvoiceError, ValueError):
    """Shapes or axes do not line up."""


class ParameterError(DeskvoiceError, ValueError):
    """An argument value is outside its contract (bad stride, factor, step count...)."""


class ContractError(DeskvoiceError, ValueError):
    """A call violates an API contract (non-scalar loss, wrong token group, missing label)."""


class NumericError(DeskvoiceError, ArithmeticError):
    """NaN/Inf detected where finite values are required."""


class LengthError(DeskvoiceError, ValueError):
    """Input too short (or empty) for the requested operation."""


class VocabularyError(DeskvoiceError, KeyError):
    """Unknown symbol or token."""


class StateError(DeskvoiceError, RuntimeError):
    """Operation needs state that is not present (untrained model, missing recognizer)."""


class DependencyError(DeskvoiceError, RuntimeError):
    """A pipeline stage is missing an artifact from an earlier stage."""

    def __init__(self, stage: str, needed: str):
        super().__init__(f"stage '{stage}' requires '{needed}'; run that stage first")
        self.stage = stage
        self.needed = needed


class FormatError(DeskvoiceError, ValueError):
    """A file is not in the expected on-disk format."""


class ParseError(DeskvoiceError, ValueError):
    """Malformed instruction/marker text; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class InfeasibleTargetError(DeskvoiceError, ValueError):
    """CTC target cannot be aligned inside the available frames; loss is +inf."""
