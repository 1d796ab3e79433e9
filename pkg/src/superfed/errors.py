"""Exception types raised across the simulator."""


class ShapeError(ValueError):
    """Operands do not share a network layout or batch shape."""


class DataFormatError(ValueError):
    """An input file could not be parsed."""


class ConfigError(ValueError):
    """A run configuration violates one of its invariants.

    ``path`` names the offending field (dotted for nested fields).
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class NonFiniteError(FloatingPointError):
    """Training produced NaN or inf; the message carries round/client context."""


class ProtocolError(RuntimeError):
    """The federation protocol was driven into an invalid state."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or has an unsupported version."""
