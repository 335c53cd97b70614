"""Exception types raised across the package."""


class SparseBodyError(Exception):
    """Base class for all package errors."""


class DegenerateInput(SparseBodyError, ValueError):
    """A rotation encoding has vanishing or parallel components."""


class InvalidRotation(SparseBodyError, ValueError):
    """A matrix is not a proper rotation within tolerance."""


class ShapeMismatch(SparseBodyError, ValueError):
    pass


class FileFormatError(SparseBodyError, ValueError):
    """A file does not follow the expected container layout."""


class UnknownConfig(SparseBodyError, KeyError):
    pass


class MissingAnchor(SparseBodyError, ValueError):
    """The head joint carries no signal, so normalization has no reference."""


class AnchorMasked(SparseBodyError, ValueError):
    """A mask tried to hide an always-observed joint."""


class NonFiniteError(SparseBodyError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""
