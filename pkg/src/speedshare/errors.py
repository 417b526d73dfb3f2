"""Exception hierarchy shared by every speedshare module.

Each error class carries the process exit code the CLI maps it to:
2 configuration, 3 data, 4 connectivity, 5 integrity/format.
"""


class SpeedShareError(Exception):
    exit_code = 1


class ConfigurationError(SpeedShareError):
    """Invalid parameter, flag, or off-grid hyperparameter value."""

    exit_code = 2


class DataError(SpeedShareError):
    """Malformed, inconsistent, or insufficient input data."""

    exit_code = 3


class ParseError(DataError):
    """Unreadable CSV row; message names the offending line."""


class CadenceError(DataError):
    """Timestamp spacing deviates from the fixed 5-minute interval."""


class TrainingError(SpeedShareError):
    """Training loss or gradients became non-finite."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class NumericalError(SpeedShareError):
    """Non-finite activation inside a forward pass."""


class ConnectivityError(SpeedShareError):
    """No reachable worker, or every worker connection was lost."""

    exit_code = 4


class FormatError(SpeedShareError):
    """Serialized document has an unknown or mismatched format version."""

    exit_code = 5


class IntegrityError(SpeedShareError):
    """Persisted registry is internally inconsistent (e.g. dangling donor)."""

    exit_code = 5


class FramingError(SpeedShareError):
    """Truncated or oversized wire frame."""

    exit_code = 5


class ProtocolError(SpeedShareError):
    """Well-framed but semantically invalid wire message."""

    exit_code = 5


class HandshakeError(ProtocolError):
    """Protocol version mismatch during the hello exchange."""
