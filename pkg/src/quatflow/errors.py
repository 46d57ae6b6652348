"""Exception types shared across the package.

Every domain precondition failure raises one of these, so callers (and the
CLI exit-code mapping) can distinguish bad input data from I/O problems.
"""


class ZeroNorm(ValueError):
    """Quaternion norm too small to normalize."""


class DegenerateInput(ValueError):
    """Input vectors are parallel or otherwise rank deficient."""


class ShapeMismatch(ValueError):
    """Array arguments disagree in shape."""


class InvalidStep(ValueError):
    """Integration step leaves the valid flow-time interval."""


class InsufficientData(ValueError):
    """Not enough (or too degenerate) data to fit statistics."""


class IndexOutOfRange(IndexError):
    """Token or element index outside the valid range."""


class EmptyMask(ValueError):
    """Object mask selects no valid points."""


class TooFewPoints(ValueError):
    """Point cloud too small for the requested neighborhood statistic."""


class DegenerateCloud(ValueError):
    """Point cloud has too little spatial extent for a 3D bounding box."""


class EmptyCloud(ValueError):
    """Operation requires a non-empty point cloud."""


class NoObjects(ValueError):
    """Scene has no usable objects after filtering."""


class TooShort(ValueError):
    """Trajectory does not span enough time for resampling."""


class OutOfRange(IndexError):
    """Chunk window exceeds the trajectory length."""


class EmptySpec(ValueError):
    """Mixture specification has no entries."""


class DivergenceDetected(RuntimeError):
    """Training loss became non-finite."""


class DegenerateCovariance(ValueError):
    """Covariance cannot be made positive definite."""


class BehindCamera(ValueError):
    """Point has non-positive depth and cannot be projected."""


class BlobFormatError(ValueError):
    """Tensor blob file is malformed."""
