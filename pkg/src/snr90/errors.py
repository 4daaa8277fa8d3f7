"""Exception hierarchy shared across the toolkit.

Everything raised for bad *data* (malformed files, invariant violations,
out-of-range parameters) derives from ``DataError`` so the CLI can map it
to a single exit code. Programming errors stay ordinary exceptions.
"""


class DataError(Exception):
    """Invalid input data or parameters."""


class AudioFormatError(DataError):
    """Unreadable or unsupported WAV content."""


class AnnotationError(DataError):
    """Missing or inconsistent segment annotation."""


class NoThresholdError(DataError):
    """A response curve never crosses the 90% criterion."""


class NoF0Error(DataError):
    """No voiced region detectable in a clip."""


class GridError(DataError):
    """Distortion parameter off the allowed grid or range."""


class TrainingDivergedError(Exception):
    """Loss became non-finite during training."""
