"""
Exception hierarchy shared by every module.
"""


class NimfError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(NimfError, ValueError):
    """An argument violates an operation's precondition."""


class ShapeMismatchError(InvalidArgumentError):
    """Matrix or level shapes do not conform."""


class ConfigError(InvalidArgumentError):
    """Malformed configuration file, manifest or preset."""


class FusionNotApplicableError(InvalidArgumentError):
    """The requested variant cannot fuse these models (reported as N/A)."""


class NumericsError(NimfError, ArithmeticError):
    """A linear-algebra kernel failed to converge."""


class DivergenceError(NimfError, ArithmeticError):
    """An optimization produced a non-finite loss."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ModelFormatError(NimfError, ValueError):
    """A model file does not follow the NIMF format."""


class BadMagicError(ModelFormatError):
    """The stream does not start with the NIMF magic bytes."""


class VersionMismatchError(ModelFormatError):
    """The stream declares an unsupported format version."""


class TruncatedModelError(ModelFormatError):
    """The stream ended before the declared content."""


class IdxFormatError(NimfError, ValueError):
    """An IDX file has a wrong magic number or inconsistent shape."""


class SerializationError(ModelFormatError):
    """A model does not fit the NIMF format's field widths."""
