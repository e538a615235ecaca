"""Exception types shared across the pipeline."""


class LocfuseError(Exception):
    """Base class for all package errors."""


class BehindCameraError(LocfuseError):
    """Point has non-positive depth in the camera frame."""


class DegenerateBaselineError(LocfuseError):
    """Relative translation between two poses is too small for epipolar geometry."""


class DegenerateDenominatorError(LocfuseError):
    """All four Sampson derivative terms vanish."""


class InsufficientParallaxError(LocfuseError):
    """Triangulation rays are too close to parallel."""


class CheiralityError(LocfuseError):
    """Triangulated point lies behind one of its cameras."""


class TooFewMatchesError(LocfuseError):
    """Fewer matches than the minimal sample size."""


class NoConsensusError(LocfuseError):
    """RANSAC found no model with enough inliers."""


class EmptyMatchSetError(LocfuseError):
    """A match set that must be non-empty is empty."""


class EmptySequenceError(LocfuseError):
    """Chain solver was handed a graph with no frames."""


class OracleScaleError(LocfuseError):
    """Problem too large for the exhaustive reference solver."""


class SolverDivergedError(LocfuseError):
    """Nonlinear solve produced non-finite state."""


class NoSeedsError(LocfuseError):
    """No frame qualifies as an initialization seed."""


class NoOverlapError(LocfuseError):
    """Estimated and reference trajectories share no frames."""


class InvalidConfigError(LocfuseError):
    """Configuration value out of range or unparseable."""


class FileFormatError(LocfuseError):
    """Malformed input file; carries file name and line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = int(line_no)
        self.reason = message
