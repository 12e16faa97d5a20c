"""Exception hierarchy shared by every gtalab module."""


class GtaError(Exception):
    """Base class for all library errors."""


class DimensionError(GtaError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(GtaError, ValueError):
    """A spec, block plan or option set is invalid."""


class ContractError(GtaError, ValueError):
    """A call violated an operation precondition."""


class NumericError(GtaError, ArithmeticError):
    """A NaN or infinity was produced."""


class FormatError(GtaError):
    """A binary container is malformed.

    ``offset`` is the byte position where parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(FormatError):
    """The trailing CRC-32 does not match the payload."""


class IntegrityError(GtaError):
    """A checkpoint does not match the model spec it is loaded against."""
