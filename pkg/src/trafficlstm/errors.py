"""Exception hierarchy.

The CLI maps ``UsageError`` to exit code 2 and every other ``TrafficLSTMError``
to exit code 1.
"""


class TrafficLSTMError(Exception):
    """Base class for all package errors."""


class UsageError(TrafficLSTMError, ValueError):
    """Bad arguments or an invalid call sequence chosen by the caller."""


class DimensionError(TrafficLSTMError, ValueError):
    """Operand shapes are incompatible."""


class StateError(TrafficLSTMError, RuntimeError):
    """An operation was invoked in the wrong state (e.g. backward before forward)."""


class NumericError(TrafficLSTMError, ArithmeticError):
    """NaN/inf encountered, or a degenerate quantity such as a zero scale."""


class EmptySelectionError(TrafficLSTMError, ValueError):
    """A filter left nothing to work with."""


class SchemaError(TrafficLSTMError, ValueError):
    """Input file lacks a required column."""


class RowError(TrafficLSTMError, ValueError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class CheckpointError(TrafficLSTMError):
    """Base class for checkpoint decoding failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class ChecksumError(CorruptCheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass
