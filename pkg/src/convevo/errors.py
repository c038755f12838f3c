"""Exception types shared across the package."""


class ShapeError(ValueError):
    """A layer cannot operate on (or would collapse) its input shape.

    ``layer_index`` is the position of the offending layer in the genome or
    network when known, ``dimension`` names the dimension that failed.
    """

    def __init__(self, message, layer_index=None, dimension=None):
        super().__init__(message)
        self.layer_index = layer_index
        self.dimension = dimension


class EvalFailure(RuntimeError):
    """A candidate evaluation failed (bad shapes, diverged loss, timeout).

    Failures are data for the evolution loop: they are caught, turned into
    records with a -inf fitness sentinel, and never kill the run.
    """

    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


class FormatError(ValueError):
    """A binary file does not match its declared on-disk format."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """Invalid or unknown run configuration."""


class ProtocolError(ValueError):
    """Malformed or unknown message on the worker wire protocol."""
