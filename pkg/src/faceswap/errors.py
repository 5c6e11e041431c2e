"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see cli.EXIT_CODES).
"""


class FaceSwapError(Exception):
    """Base class for all package errors."""


class ConfigError(FaceSwapError):
    """Invalid or inconsistent pipeline configuration."""


class CheckpointError(FaceSwapError):
    """Missing, corrupt, or config-incompatible checkpoint."""


class DataError(FaceSwapError):
    """Unreadable input, empty dataset, or malformed manifest."""


class AlignmentError(DataError):
    """Degenerate or missing landmarks during face alignment."""


class OcclusionError(DataError):
    """Unusable occluder asset (empty alpha support, zero area)."""


class NumericError(FaceSwapError):
    """Non-finite loss or activation; training abort signal."""
