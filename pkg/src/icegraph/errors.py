"""Shared exception types.

The CLI maps these onto exit codes: usage/contract problems exit 2,
I/O and data problems exit 1.
"""


class IcegraphError(Exception):
    """Base class for all package errors."""


class ShapeError(IcegraphError, ValueError):
    """Operands have incompatible dimensions."""


class ConfigError(IcegraphError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class ContractError(IcegraphError, RuntimeError):
    """A caller violated an API precondition (wrong mode, reused tape, ...)."""


class DataError(IcegraphError, ValueError):
    """An input record or corpus file is malformed or unusable."""


class RecordRejected(DataError):
    """A record failed a dataset protocol requirement; carries the record id."""

    def __init__(self, record_id, reason):
        self.record_id = record_id
        self.reason = reason
        super().__init__(f"record {record_id!r} rejected: {reason}")


class GeoDomainError(IcegraphError, ValueError):
    """An edge-weight computation left the valid domain (arcsin argument > 1)."""


class NumericalError(IcegraphError, RuntimeError):
    """Training produced NaN/Inf; carries the epoch/record/parameter context."""
