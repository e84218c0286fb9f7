"""Exception hierarchy shared across the package.

CLI exit codes: usage errors map to 1, DataError to 2, ModelError (and its
NumericError subclass) to 3.
"""


class RefalignError(Exception):
    """Base class for all package errors."""


class ShapeError(RefalignError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(RefalignError):
    """A numeric contract was violated (non-finite values, bad ranges)."""


class DataError(RefalignError):
    """Invalid or degenerate data inputs (masks, images, manifests)."""


class ModelError(RefalignError):
    """Model state is unusable (missing weights, NaN parameters)."""


class EmptyRegionError(RefalignError):
    """Correspondence post-processing found no surviving region."""


class PlacementError(DataError):
    """An augmented object could not be placed inside the frame."""
