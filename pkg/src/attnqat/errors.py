"""Exception types shared across the package."""


class AttnQatError(Exception):
    """Base class for all package errors."""


class InvalidValue(AttnQatError):
    """A value outside an operation's domain (non-finite, negative, NaN code...)."""


class ShapeError(AttnQatError):
    """Tensor dimensions violate an operation's contract."""


class TileError(AttnQatError):
    """Tile sizes do not evenly divide the sequence lengths."""


class FormatError(AttnQatError):
    """Malformed on-disk tensor file. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MissingOPrime(AttnQatError):
    """Backward pass needs the high-precision auxiliary output but it is absent."""


class StabilityError(AttnQatError):
    """Training diverged. Carries the step index where divergence was detected."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (at step {step})"
        super().__init__(message)
        self.step = step
