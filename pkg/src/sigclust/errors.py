"""Exception types shared across the package."""


class FormatError(Exception):
    """A stored artifact violates its binary format."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class ShapeTableError(FormatError):
    """Checkpoint tensor shapes disagree with the expected architecture."""


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite loss value."""
