"""Exception types raised by the Set-Mixer library."""


class SetMixError(Exception):
    """Base class for all library errors."""


class NonFiniteError(SetMixError, ValueError):
    """A coordinate, key or value is NaN or infinite."""


class BadCountError(SetMixError, ValueError):
    """A requested sample or neighbour count is out of range."""


class DegenerateRefError(SetMixError, ValueError):
    """The PCS reference vector has no component in the sorting plane."""


class ShapeMismatchError(SetMixError, ValueError):
    """Array shapes do not chain."""


class GraphCycleError(SetMixError, RuntimeError):
    """A tape node refers to a node recorded after it."""


class NotNormalizedError(SetMixError, ValueError):
    """A cloud handed to a corruption lies outside the unit sphere."""


class DegenerateBaselineError(SetMixError, ZeroDivisionError):
    """The RmCE baseline has equal clean and noise error rates."""


class ChecksumMismatchError(SetMixError):
    """A checkpoint was trained with a different configuration."""


class CountMismatchError(SetMixError, ValueError):
    """Clean and corrupted clouds do not have the same number of points."""


class DataFormatError(SetMixError, ValueError):
    """A file on disk is malformed."""
