"""Exception types shared across the toolkit."""


class NodekitError(Exception):
    """Base class for all toolkit errors."""


class NiftiFormatError(NodekitError):
    """File is not a parseable NIfTI-1 file (bad magic, truncated header, ...)."""


class UnsupportedDatatypeError(NiftiFormatError):
    """NIfTI datatype code outside the supported set."""


class DataError(NodekitError):
    """Voxel data violates an invariant (NaN/Inf samples, bad label values)."""


class GeometryError(NodekitError):
    """Volume geometries are inconsistent or misaligned for the operation."""


class EmptyMaskError(NodekitError):
    """An operation that needs a non-empty mask received an empty one."""


class DegenerateIntensityError(NodekitError):
    """Intensity statistics are degenerate (e.g. zero spread in the foreground)."""


class LandmarkError(NodekitError):
    """An anatomical landmark could not be located."""


class ConvergenceError(NodekitError):
    """Iterative optimization diverged; carries the best transform seen so far."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
