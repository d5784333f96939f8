"""Exception types shared across the package."""


class CameroError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CameroError):
    """Operand shapes do not conform for the requested operation."""


class NumericError(CameroError):
    """Non-finite values encountered where finite ones are required."""


class ContractError(CameroError):
    """An operation was called outside its documented contract."""


class SpecError(CameroError):
    """Invalid field values in a spec/config object."""


class DataError(CameroError):
    """Malformed dataset input (ragged rows, non-numeric cells, empty)."""


class OracleError(CameroError):
    """A test oracle's own preconditions were violated."""
