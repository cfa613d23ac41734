"""Exception types shared across the package."""


class IvqError(Exception):
    """Base class for all errors raised by ivq."""


class ShapeError(IvqError):
    """Operands have incompatible or invalid shapes."""


class DomainError(IvqError):
    """An input value is outside the operation's domain."""


class TokenRangeError(IvqError):
    """A token id is outside the model vocabulary."""


class FormatError(IvqError):
    """A file does not follow the container or token-text format."""


class CorruptionError(FormatError):
    """A container file is structurally valid but internally inconsistent."""


class ParseError(IvqError):
    """A token-text file could not be parsed."""
