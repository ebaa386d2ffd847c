"""Typed errors shared across the package.

Every error the CLI reports carries a short machine-readable tag so shell
callers can branch on exit messages.
"""


class PansegError(Exception):
    """Base class; `tag` is the stable identifier printed by the CLI."""

    tag = "error"


class NonTilingError(PansegError):
    tag = "non-tiling"


class DegeneratePatchError(PansegError):
    tag = "degenerate-patch"


class GeometryMismatchError(PansegError):
    tag = "geometry-mismatch"


class EmptyResultError(PansegError):
    tag = "empty-result"


class ShapeMismatchError(PansegError):
    tag = "shape-mismatch"


class NotScalarLossError(PansegError):
    tag = "not-scalar-loss"


class BadCheckpointError(PansegError):
    tag = "bad-checkpoint"


class MissingCheckpointError(PansegError):
    tag = "missing-checkpoint"


class MissingFileError(PansegError):
    tag = "missing-file"


class BadLabelValueError(PansegError):
    tag = "bad-label-value"


class EmptyDatasetError(PansegError):
    tag = "empty-dataset"


class EmptyPredictionSetError(PansegError):
    tag = "empty-prediction-set"


class ConfigError(PansegError):
    tag = "config"


class IoError(PansegError):
    tag = "io"
