"""Exception types shared across the calibration library."""


class CalibrationError(Exception):
    """Base class for all library-specific errors."""


class DomainError(CalibrationError):
    """Evaluation time lies outside the valid domain of a spline."""


class RankDeficiencyError(CalibrationError):
    """A least-squares system is underdetermined."""


class BehindCameraError(CalibrationError):
    """A point to project lies behind the camera."""


class ProjectionConvergenceError(CalibrationError):
    """Iterative distortion inversion failed to converge."""


class InsufficientDataError(CalibrationError):
    """Not enough usable data to run an operation."""


class DegenerateGeometryError(CalibrationError):
    """Input geometry does not constrain the requested estimate."""


class EmptyProblemError(CalibrationError):
    """An optimization problem was assembled with no residuals."""


class NumericalFailureError(CalibrationError):
    """The solver produced a non-finite cost or step."""


class DataFormatError(CalibrationError):
    """A data or configuration file failed to parse or validate."""
