"""Exception hierarchy shared by the package.

Validation problems (bad arguments, bad configs, malformed inputs) derive from
``ValidationError`` so the CLI can map them to exit code 2; everything else that
goes wrong with the data at run time maps to exit code 3.
"""


class ShiftplError(Exception):
    """Base class for all package errors."""


class ValidationError(ShiftplError, ValueError):
    """An argument, parameter or configuration value is out of its domain."""


class SchemaError(ValidationError):
    """A required column is missing or a schema name is unknown."""


class ParseError(ValidationError):
    """A cell could not be parsed; carries the 1-based data row number."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class ResampleError(ValidationError):
    """Target timestep is not an integer multiple of the recording timestep."""


class InsufficientDataError(ShiftplError):
    """Too few samples/windows for the requested estimate."""


class FitError(ShiftplError):
    """The violation-curve regression cannot be carried out."""
