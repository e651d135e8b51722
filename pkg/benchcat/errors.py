"""Exceptions raised by benchcat.

Every domain error is a ValueError so callers that only guard against bad
input keep working.
"""


class BenchcatError(ValueError):
    """Base class of all benchcat errors."""


class MatrixParseError(BenchcatError):
    """A response matrix file violates the documented CSV format."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyPopulationError(BenchcatError):
    """Model filtering removed every model."""


class EmptyBankError(BenchcatError):
    """Item filtering removed every item."""


class UndefinedCorrelationError(BenchcatError):
    """A correlation has a zero-variance argument."""


class DegeneratePosteriorError(BenchcatError):
    """The EAP posterior is numerically zero at every quadrature node."""


class DegenerateLinkError(BenchcatError):
    """Linking abilities have zero spread."""


class CalibrationError(BenchcatError):
    """Calibration cannot produce a usable bank."""


class SchemaVersionError(BenchcatError):
    """A stored file was written with an unsupported schema version."""


class BankParseError(BenchcatError):
    """An item bank file has a corrupted entry."""

    def __init__(self, message, item_id=None):
        super().__init__(message)
        self.item_id = item_id


class ConfigurationError(BenchcatError):
    """Configuration is inconsistent with the bank or the run."""


class ProtocolError(BenchcatError):
    """A response was submitted for an item that was not solicited."""


class ResponderError(BenchcatError):
    """A responder could not produce a response."""


class PairingError(BenchcatError):
    """Two keyed score maps do not cover the same respondents."""


class UndefinedOverlapError(BenchcatError):
    """Test overlap needs at least two sessions of positive length."""
