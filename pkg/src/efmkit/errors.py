"""Exception hierarchy shared by all efmkit modules.

Every error raised on a contract violation derives from :class:`EfmKitError`,
so callers (and the CLI) can separate data problems from genuine bugs.
"""


class EfmKitError(Exception):
    """Base class for all efmkit errors."""


class ShapeError(EfmKitError, ValueError):
    """Input dimensions disagree with what an operation requires."""


class ParameterError(EfmKitError, ValueError):
    """A hyperparameter or option is outside its valid range."""


class CapacityError(EfmKitError, OverflowError):
    """A requested computation exceeds representable or practical size."""


class NoDataError(EfmKitError, ValueError):
    """An operation that needs at least one sample received none."""


class LabelError(EfmKitError, ValueError):
    """Labels are not binary 0/1."""


class FormatError(EfmKitError, ValueError):
    """A file could not be parsed as the expected format."""


class AmbiguousMaskError(FormatError):
    """A mask raster contains gray values that are neither 0 nor full scale."""


class IsolatedPointError(EfmKitError, ValueError):
    """One or more points carry no affinity mass in the clustering graph."""

    def __init__(self, indices):
        self.indices = list(indices)
        super().__init__(
            f"{len(self.indices)} point(s) have zero affinity degree: "
            f"{self.indices[:10]}{'...' if len(self.indices) > 10 else ''}"
        )


class DegenerateSubsetWarning(UserWarning):
    """A training subset contains a single class; selection scores are partial."""
