"""Exception and warning types shared across the package."""


class LmmError(Exception):
    """Base class for all fslmm errors."""


class NumericalError(LmmError):
    """A linear-algebra operation failed or produced an invalid result."""


class DegenerateDataError(LmmError):
    """The data cannot support the requested model (rank/variance defects)."""


class SpecificationError(LmmError):
    """A model, contrast, or file specification is malformed."""


class PedigreeError(LmmError):
    """Family relationship declarations are inconsistent."""


class NumericalWarning(UserWarning):
    """A recoverable numerical issue (pseudo-inverse fallback, etc.)."""


class ConvergenceWarning(UserWarning):
    """An iterative procedure stopped without meeting its tolerance."""
