"""Exception types shared across the package."""


class SigmatchError(Exception):
    """Base class for all package errors."""


class FormatError(SigmatchError):
    """A file does not conform to its declared format."""


class DimensionError(SigmatchError, ValueError):
    """Vector or matrix dimensions disagree."""


class SplitError(SigmatchError):
    """A requested dataset split cannot be realized."""


class BatchTooSmall(SigmatchError, ValueError):
    """Batch normalization in train mode needs at least two rows."""


class StateError(SigmatchError):
    """A forward cache does not belong to the network state it is used with."""


class MiningError(SigmatchError):
    """The batch cannot yield any valid tuple of the requested kind."""


class DivergenceError(SigmatchError):
    """Training produced a non-finite loss, signature or parameter."""

    def __init__(self, epoch, batch, value):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        what = value if isinstance(value, str) else f"non-finite loss {value!r}"
        super().__init__(f"{what} at epoch {epoch}, batch {batch}")


class DuplicateError(SigmatchError):
    """An identity is already enrolled."""


class InputError(SigmatchError, ValueError):
    """Invalid argument combination for a metrics or benchmark call."""


class UndefinedMetric(SigmatchError, ZeroDivisionError):
    """A rate whose denominator is zero."""


class DegenerateInput(UserWarning):
    """Emitted when a zero vector cannot be normalized."""
