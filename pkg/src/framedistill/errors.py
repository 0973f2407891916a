"""Exception hierarchy shared across the package."""


class FrameDistillError(Exception):
    """Base class for all package errors."""


class NoFrames(FrameDistillError):
    pass


class InconsistentFrames(FrameDistillError):
    pass


class ClipOutOfBounds(FrameDistillError):
    pass


class FrameTooSmall(FrameDistillError):
    pass


class GeometryMismatch(FrameDistillError):
    pass


class ShapeError(FrameDistillError, ValueError):
    pass


class InvalidTemperature(FrameDistillError, ValueError):
    pass


class NoPairs(FrameDistillError, ValueError):
    pass


class NoLocalViews(FrameDistillError, ValueError):
    pass


class ParamTreeMismatch(FrameDistillError):
    pass


class ScheduleError(FrameDistillError, ValueError):
    pass


class DivergenceError(FrameDistillError):
    """Raised when a training step produces a non-finite loss."""


class CanvasError(FrameDistillError, ValueError):
    pass


class CheckpointError(FrameDistillError):
    pass


class NoData(FrameDistillError):
    pass


class ConfigError(FrameDistillError, ValueError):
    """Invalid run configuration; ``problems`` lists every offending key."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
