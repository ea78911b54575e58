"""Exception types raised across the package."""


class LipsubError(Exception):
    """Base class for all package errors."""


class FormatError(LipsubError):
    """A mesh, checkpoint or config file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class GeometryError(LipsubError):
    """Invalid mesh geometry (bad index, degenerate or inverted rest element)."""


class NumericError(LipsubError):
    """A computation produced non-finite values or a factorization failed."""


class ModeError(LipsubError):
    """An operation was requested that the model's mode does not support."""


class ConfigError(LipsubError):
    """Invalid or inconsistent configuration."""


class TrainingDiverged(NumericError):
    """Training produced a non-finite loss; carries the last good model."""

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step
