"""
Exceptions raised by the position-attention library
"""

from typing import Optional


class ShapeError(ValueError):
    """Raised when array shapes or mesh dimensions do not match."""


class NonFiniteError(ArithmeticError):
    """Raised when a numeric operation produces NaN or Inf values."""


class ContainerFormatError(ValueError):
    """Raised when a PITD container is malformed."""


class TrainingDivergedError(ArithmeticError):
    """Raised when the training loss stops being finite."""


class ConfigError(ValueError):
    """
    Invalid configuration value.

    Parameters
    ----------
    key: str
        Canonical name of the offending key.

    message: str
        Human readable description.

    line: Optional[int]
        Line number in the run-config file, if the
        value came from a file. Default: None
    """

    def __init__(self, key: str, message: str, line: Optional[int] = None):
        self.key = key
        self.message = message
        self.line = line
        location = f" (line {line})" if line is not None else ""
        super().__init__(f"{key}{location}: {message}")
