class EliasError(Exception):
    """Base class for errors raised by this package."""


class DataFormatError(EliasError, ValueError):
    pass


class IndexRangeError(EliasError, IndexError):
    pass


class InvariantError(EliasError, RuntimeError):
    """A structural invariant of the index or model was violated."""


class NonFiniteGradientError(EliasError, FloatingPointError):
    def __init__(self, group):
        super().__init__(f"non-finite gradient in parameter group {group!r}")
        self.group = group


class DivergenceError(EliasError, FloatingPointError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
