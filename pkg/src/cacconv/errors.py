"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A caller-supplied argument violates an operation's preconditions."""


class NumericFailure(ArithmeticError):
    """A computation produced non-finite values or diverged."""


class DataFormatError(ValueError):
    """An external file does not conform to its declared binary format."""
