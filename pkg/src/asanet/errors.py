"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of the operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class DegenerateBatchError(ValueError):
    """Batch statistics were requested on a batch of size 1."""


class LabelError(ValueError):
    """A class or identity label is out of range."""


class NonFiniteError(ArithmeticError):
    """A gradient or parameter became NaN or infinite."""


class FormatError(ValueError):
    """A serialized artifact (checkpoint, manifest) is corrupt or truncated."""


class ProtocolError(ValueError):
    """An evaluation protocol left nothing to evaluate."""


class IoError(OSError):
    """Result export could not write its output files."""


class EmptyTrackletError(ValueError):
    """Frame sampling was requested on a zero-length tracklet."""
