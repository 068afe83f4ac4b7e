"""
Exception hierarchy shared by every stage of the toolkit.

Each error carries the process exit code the CLI should use when it escapes
a subcommand: 2 for bad or insufficient data, 3 for numerical failures.
"""


class WarpMatchError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 2


class DimensionMismatch(WarpMatchError, ValueError):
    """Arrays that must agree in shape do not."""


class DegenerateContour(WarpMatchError):
    """A silhouette contour is too short for the requested sampling."""


class EmptyBank(WarpMatchError):
    """An exemplar warp bank has no warps to sample from."""


class OutOfBounds(WarpMatchError):
    """A keypoint or patch falls outside the image."""


class UnknownNode(WarpMatchError, KeyError):
    """An image id is not a node of the pose graph."""


class UnknownTarget(WarpMatchError, KeyError):
    """The target image has no keypoints in the keypoint graph."""


class UnknownHeuristicInput(WarpMatchError):
    """A subset-selection heuristic is missing its required input."""


class EmptyTracks(WarpMatchError):
    """No tracks survive to build a measurement matrix."""


class DatasetError(WarpMatchError):
    """A manifest record is malformed or references missing files."""


class UnattainablePrecision(WarpMatchError):
    """A precision-recall curve never reaches the requested precision."""


class NumericalError(WarpMatchError):
    """Base class for numerical failures."""

    exit_code = 3


class SingularSystem(NumericalError):
    """TPS control points are collinear, duplicated or ill-conditioned."""


class DegenerateTriangulation(NumericalError):
    """Part annotations cannot be triangulated."""


class InsufficientData(NumericalError):
    """Too few frames or points for a rank-3 factorization."""


class DivergedFactorization(NumericalError):
    """The factorization residual kept increasing."""


class StageError(WarpMatchError):
    """Wraps an error with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, message: str, exit_code: int = 2):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = exit_code

    @classmethod
    def wrap(cls, stage: str, error: Exception) -> "StageError":
        code = getattr(error, "exit_code", 2)
        return cls(stage, str(error), exit_code=code)
