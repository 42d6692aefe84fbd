"""Exception hierarchy shared by all embedcal modules."""

from __future__ import annotations


class EmbedCalError(Exception):
    """Base class for every error raised by this package."""


# geometry
class DepthNonPositive(EmbedCalError):
    pass


class RayParallelToPlane(EmbedCalError):
    pass


class IntersectionBehindOrigin(EmbedCalError):
    pass


class PointAtInfinity(EmbedCalError):
    pass


# structured light codec / decoding
class ValueOutOfRange(EmbedCalError):
    pass


class MissingCoarseCenter(EmbedCalError):
    pass


class DecodeError(EmbedCalError):
    """A time series could not be turned into a projector coordinate."""


class NotIlluminated(DecodeError):
    pass


class AmbiguousBit(DecodeError):
    pass


class CodeOutOfRange(DecodeError):
    pass


class DuplicateProjectorBlob(EmbedCalError):
    def __init__(self, projector: int, centroids):
        self.projector = projector
        self.centroids = [tuple(float(v) for v in c) for c in centroids]
        super().__init__(
            f"projector {projector} decoded from {len(self.centroids)} disjoint blobs "
            f"at {self.centroids}"
        )


# simulator
class ProjectorBehindBoard(EmbedCalError):
    pass


class NotVisible(EmbedCalError):
    pass


# compensation
class AllDark(EmbedCalError):
    pass


class NoLineFound(EmbedCalError):
    pass


class LinesParallel(EmbedCalError):
    pass


class InsufficientPoints(EmbedCalError):
    pass


class DegenerateConfiguration(EmbedCalError):
    pass


class TooFewInliers(EmbedCalError):
    pass


class CameraMismatch(EmbedCalError):
    pass


# calibration
class InsufficientPoses(EmbedCalError):
    pass


class NotPositiveDefinite(EmbedCalError):
    pass


class BehindBoard(EmbedCalError):
    pass


class SingularNormalEquations(EmbedCalError):
    pass


class PoseError(EmbedCalError):
    """Wraps a stage error with the board pose it came from."""

    def __init__(self, pose: int, error: Exception):
        self.pose = pose
        self.error = error
        super().__init__(f"pose {pose}: {type(error).__name__}: {error}")


# cli
class ParseError(EmbedCalError):
    pass


class ValidationError(EmbedCalError):
    pass


class StageFailure(EmbedCalError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {message}")


class IoError(EmbedCalError):
    pass
