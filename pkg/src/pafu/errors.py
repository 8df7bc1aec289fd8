"""Exception types shared across the package."""


class PafuError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PafuError):
    """Operand shapes are inconsistent with the operation's contract."""


class UnsupportedKernelError(PafuError):
    """Kernel geometry is not supported (e.g. even support size)."""


class ContractError(PafuError):
    """An argument violates a documented precondition."""


class NumericError(PafuError):
    """A computation produced non-finite values where finiteness is required."""


class FormatError(PafuError):
    """A file does not match the expected on-disk format."""


class CorruptionError(FormatError):
    """A file matches the format header but its body is truncated or inconsistent."""
