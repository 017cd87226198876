__all__ = [
    "BehindCameraError",
    "BookkeepingError",
    "ConfigurationError",
    "DatasetFormatError",
    "DegenerateInputError",
    "DegenerateStateError",
    "DenseTrackingFailure",
    "EmptyDatasetError",
    "EmptyDomainError",
    "ExportError",
    "InsufficientDataError",
    "InvalidDepthError",
    "SparseTrackingFailure",
    "SurfelFusionError",
    "TrackingFailure",
    "UninitializedStateError",
]


class SurfelFusionError(Exception):
    """
    Base class for every error raised deliberately by ``surfel_fusion``.

    Subclasses also derive from the closest builtin exception, so callers that only
    know about e.g. :py:class:`ValueError` still catch them.
    """

    pass


class DegenerateInputError(SurfelFusionError, ValueError):
    """
    An input sits on a singularity of the requested operation (rotation angle at π,
    non-unit axis, zero-length normal, ...).
    """

    pass


class BehindCameraError(SurfelFusionError, ValueError):
    """
    A point with non-positive camera-frame depth was projected.
    """

    pass


class InvalidDepthError(SurfelFusionError, ValueError):
    """
    A depth value was non-positive or not finite.
    """

    pass


class ConfigurationError(SurfelFusionError, ValueError):
    """
    A configuration value (or a combination of values) is not allowed.
    """

    pass


class UninitializedStateError(SurfelFusionError, ValueError):
    """
    The information matrix has a zero component, so the state cannot be recovered.
    """

    pass


class DegenerateStateError(SurfelFusionError, ValueError):
    """
    A fused surfel state has a zero normal block.
    """

    pass


class EmptyDomainError(SurfelFusionError, ValueError):
    """
    A loss or metric was requested over an empty set of pixels / samples.
    """

    pass


class BookkeepingError(SurfelFusionError, KeyError):
    """
    A regularisation anchor is missing for an optimised surfel.
    """

    pass


class InsufficientDataError(SurfelFusionError, ValueError):
    """
    Too few associated samples to compute a metric.
    """

    pass


class DatasetFormatError(SurfelFusionError, ValueError):
    """
    A dataset directory does not follow the expected on-disk layout.
    """

    pass


class EmptyDatasetError(DatasetFormatError):
    """
    A dataset was readable but yielded no usable frames.
    """

    pass


class ExportError(SurfelFusionError, OSError):
    """
    Reading or writing an artifact failed.  The message always names the path.
    """

    pass


class TrackingFailure(SurfelFusionError, RuntimeError):
    """
    A tracking stage could not produce a pose.  The tracker catches these and falls
    back to the previous stage's estimate.
    """

    pass


class SparseTrackingFailure(TrackingFailure):
    """
    Too few correspondences or inliers for the reprojection solver.
    """

    pass


class DenseTrackingFailure(TrackingFailure):
    """
    Too few projective associations for dense alignment.
    """

    pass
