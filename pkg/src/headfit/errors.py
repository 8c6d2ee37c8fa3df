"""Exception types raised across the fitting pipeline."""


class HeadFitError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(HeadFitError):
    """Arguments are structurally wrong: dimension mismatch, zero vector, bad range."""


class BehindCameraError(HeadFitError):
    """A point required to project lies at or behind the camera plane."""

    def __init__(self, message, frame_id=None, keypoint_id=None):
        super().__init__(message)
        self.frame_id = frame_id
        self.keypoint_id = keypoint_id


class DegenerateGeometryError(HeadFitError):
    """Point configuration does not determine a transform (too few / collinear points)."""


class IllPosedSolveError(HeadFitError):
    """Normal equations are singular or numerically unusable."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class OverFilteredError(HeadFitError):
    """Mesh filtering removed everything."""


class UnfittableSceneError(HeadFitError):
    """Scene lacks the frames or observations needed to run a fit."""


class FormatError(HeadFitError):
    """A file could not be parsed or failed validation."""

    def __init__(self, message, path=None):
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
