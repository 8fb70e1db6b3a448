"""Exceptions raised by the hgmamba toolbox"""
from typing import Optional


class HGMambaError(Exception):
    """Root of all the errors raised by hgmamba"""


class DimensionError(HGMambaError, ValueError):
    """Operands with non conforming shapes"""


class StructuralError(HGMambaError, ValueError):
    """Inconsistent incidence structure, membership index or node count"""


class NumericalError(HGMambaError, ArithmeticError):
    """A non-finite value appeared during a computation"""

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class UsageError(HGMambaError, RuntimeError):
    """An API was called out of order (e.g. a backward pass without a cached forward)"""


class ConfigError(HGMambaError, ValueError):
    """Invalid or unknown configuration entry"""


class BagFormatError(HGMambaError, IOError):
    """A TFB1 file could not be decoded"""


class BadMagicError(BagFormatError):
    """The file does not start with the TFB1 magic"""


class TruncatedBagError(BagFormatError):
    """The byte length of the file does not match its header"""

    def __init__(self, expected: int, actual: int, path: str = ""):
        super().__init__(f"Truncated bag file {path}: expected {expected} bytes, got {actual} bytes")
        self.expected = expected
        self.actual = actual


class NonFiniteBagError(BagFormatError):
    """The feature payload contains NaN or infinite values"""


class CheckpointFormatError(HGMambaError, IOError):
    """A checkpoint container could not be decoded"""
