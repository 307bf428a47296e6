"""Exception hierarchy shared by every module."""


class RewarpError(Exception):
    """Base class for all library errors."""


class SingularHomography(RewarpError):
    pass


class DegenerateCorners(RewarpError):
    pass


class DuplicateControlPoints(RewarpError):
    pass


class SingularL(RewarpError):
    pass


class ImageTooSmall(RewarpError):
    pass


class EmptyMask(RewarpError):
    pass


class StitchFailure(RewarpError):
    """Alignment produced an unusable warp; counted as an evaluation failure.

    ``kind`` is the failure label written to reports.
    """

    kind = "Failure"


class NoOverlap(StitchFailure):
    kind = "NoOverlap"


class UnreasonableWarp(StitchFailure):
    kind = "UnreasonableWarp"
