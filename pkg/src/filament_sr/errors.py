"""Exception hierarchy shared by every pipeline stage."""


class FilamentSRError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(FilamentSRError, ValueError):
    """Malformed or unreadable image / checkpoint / manifest file."""


class DepthError(FilamentSRError, ValueError):
    """Unsupported or mismatched bit depth."""


class RangeError(FilamentSRError, ValueError):
    """Value outside the representable range of the requested depth."""


class ShapeError(FilamentSRError, ValueError):
    """Array or tensor dimensions incompatible with the operation."""


class ParameterError(FilamentSRError, ValueError):
    """Invalid numeric parameter."""


class TrainingError(FilamentSRError, RuntimeError):
    """Training aborted (e.g. non-finite loss)."""


class NoPeakError(FilamentSRError, ValueError):
    """A profile has no half-maximum crossing on one side of its peak."""
