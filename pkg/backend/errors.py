# backend/errors.py
"""
Exception hierarchy.
Every error carries a category used by the CLI for the message prefix and exit code.
"""

from typing import Optional


class ResTPError(Exception):
    category = "error"
    exit_code = 1


class DimensionError(ResTPError):
    """Shape or channel mismatch. Names the offending axis."""

    category = "dimension"
    exit_code = 3

    def __init__(self, message: str, axis: Optional[str] = None):
        self.axis = axis
        super().__init__(f"{message} (axis: {axis})" if axis else message)


class NumericError(ResTPError):
    category = "numeric"
    exit_code = 4

    def __init__(self, message: str, parameter: Optional[str] = None):
        self.parameter = parameter
        super().__init__(f"{message} [{parameter}]" if parameter else message)


class DivergenceError(NumericError):
    """Training loss became non-finite. The last good checkpoint is kept."""

    def __init__(self, message: str, epoch: int, checkpoint_path: Optional[str] = None):
        self.epoch = epoch
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


class ConfigurationError(ResTPError):
    category = "config"
    exit_code = 2


class CheckpointError(ResTPError):
    """Unknown parameter names, shape clashes or a corrupt checkpoint file."""

    category = "checkpoint"
    exit_code = 5


class FormatError(ResTPError):
    category = "format"
    exit_code = 6


class DatasetIOError(ResTPError):
    category = "io"
    exit_code = 7

    def __init__(self, message: str, path: str):
        self.path = path
        super().__init__(f"{message}: {path}")


class DomainError(ResTPError):
    """Input outside an operation's domain (bad label, single class, ...)."""

    category = "domain"
    exit_code = 8
