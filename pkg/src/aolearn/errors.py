"""Exception types shared across the package."""


class AolearnError(Exception):
    """Base class for all package-specific errors."""


class ZeroRow(AolearnError):
    """A row that should be normalised has (numerically) zero length.

    Signals a degenerate update upstream; ``row`` is the offending index.
    """

    def __init__(self, row, message=None):
        self.row = row
        super().__init__(message or f"row {row} has norm below 1e-14")


class DegenerateSignal(AolearnError):
    """Signal generation produced a (near-)zero vector before normalisation."""


class NumericalBranch(AolearnError):
    """Stepsize inputs violate the invariants of a positive-semidefinite source."""


class SolveFailure(AolearnError):
    """A linear solve received non-finite input."""


class EmptyPhase(AolearnError):
    """The estimation phase of the sequential learner contains no signals."""


class UncoveredPixel(AolearnError):
    """Patch reassembly found a pixel covered by no patch."""


class DimensionMismatch(AolearnError):
    """Two images (or arrays) that must share a shape do not."""


class ConfigError(AolearnError):
    """A run configuration is missing, malformed, or inconsistent."""
