"""
Exceptions - Error types raised by the tensor engine and the services
"""


class ConvTransformerError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ConvTransformerError, ValueError):
    """Operand shapes are inconsistent with the requested operation."""


class NonFiniteError(ConvTransformerError, ArithmeticError):
    """An operation produced NaN or Inf values."""


class DegenerateRepresentationError(ConvTransformerError, ValueError):
    """A representation has no variance left for CKA to measure."""


class FormatError(ConvTransformerError, ValueError):
    """A trial file, mesh dump or checkpoint is malformed."""


class EmptySelectionError(ConvTransformerError, ValueError):
    """A task filter or fold selection left no samples."""
