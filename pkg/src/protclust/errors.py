"""Exception types shared across the package."""


class ProtclustError(Exception):
    """Base class for all package errors."""


class ParseError(ProtclustError):
    """Raised when PDB text cannot be parsed into a residue chain."""


class SchemaError(ProtclustError):
    """Raised when a record, manifest, or configuration violates its schema."""


class IoError(ProtclustError):
    """Raised when a referenced file is missing or unreadable."""


class ShapeError(ProtclustError):
    """Raised when tensor operands do not conform."""


class NumericalError(ProtclustError):
    """Raised on non-finite results or invalid numerical input."""


class StateError(ProtclustError):
    """Raised when an operation runs against missing state (e.g. absent gradients)."""


class DegenerateError(ProtclustError):
    """Raised when an input is too small or empty for the requested operation."""
