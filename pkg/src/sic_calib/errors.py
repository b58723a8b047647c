"""Exception hierarchy shared by all calibration stages."""


class CalibrationError(Exception):
    """Base class. ``stage`` is filled in by the pipeline when known."""

    def __init__(self, message: str = "", stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self) -> str:
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class LengthMismatch(CalibrationError, ValueError):
    pass


class NonPositiveDepth(CalibrationError):
    pass


class InsufficientPoints(CalibrationError):
    pass


class DegenerateConfiguration(CalibrationError):
    pass


class BehindCamera(CalibrationError):
    pass


class IllPosedPose(CalibrationError):
    pass


class DistortionTooSmall(CalibrationError):
    pass


class OptimizationDiverged(CalibrationError):
    pass


class NonFiniteObjective(CalibrationError):
    pass


class InfeasibleBracket(CalibrationError):
    pass


class NoRoot(CalibrationError):
    pass


class MonotonicityFailed(CalibrationError):
    pass


class NonMonotoneCurve(CalibrationError):
    pass


class EmptyGrid(CalibrationError):
    pass


class PointOutsideSensor(CalibrationError):
    def __init__(self, message: str = "", pose_index: int | None = None):
        super().__init__(message)
        self.pose_index = pose_index
