"""Exception types shared across the pipeline."""

from __future__ import annotations


class JointCanvasError(Exception):
    """Base class for every error raised by this package."""


class LimitViolation(JointCanvasError):
    pass


class InsufficientConstraints(JointCanvasError):
    pass


class NonConvergent(JointCanvasError):
    """IK did not reach tolerance. Carries the best iterate found."""

    def __init__(self, message: str, best=None, residual: float = float("nan")):
        super().__init__(message)
        self.best = best
        self.residual = residual


class BehindCamera(JointCanvasError):
    pass


class OutOfBounds(JointCanvasError):
    pass


class DegenerateGeometry(JointCanvasError):
    pass


class WrongViewSet(JointCanvasError):
    pass


class UnknownCategory(JointCanvasError):
    pass


class UnknownTask(JointCanvasError):
    pass


class UnknownFactor(JointCanvasError):
    pass


class ExpertFailure(JointCanvasError):
    pass


class EmptyDemo(JointCanvasError):
    pass


class IoFailure(JointCanvasError):
    pass


class MissingMask(JointCanvasError):
    pass


class NoConsistentSet(JointCanvasError):
    pass


class AngleAmbiguous(JointCanvasError):
    pass


class IkChainFailure(NonConvergent):
    pass


class DrawerTimeout(JointCanvasError):
    def __init__(self, message: str, seq: int):
        super().__init__(message)
        self.seq = seq


class BadTargetImage(JointCanvasError):
    pass


class ConfigError(JointCanvasError):
    """Bad user configuration; the CLI maps it to exit code 2."""
