"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` so the CLI can map failures onto
process exit statuses without a lookup table.
"""


class LiftError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InvalidInput(LiftError):
    """Input violates a documented precondition."""

    exit_code = 2


class ShapeMismatch(InvalidInput):
    pass


class TooManyJoints(InvalidInput):
    pass


class TooShort(InvalidInput):
    pass


class IndexOutOfRange(InvalidInput):
    pass


class InvalidTemplate(InvalidInput):
    pass


class EmptyDataset(InvalidInput):
    pass


class FormatError(InvalidInput):
    pass


class ConfigError(InvalidInput):
    pass


class DegenerateCloud(LiftError):
    """Point cloud has rank < 2 after centering; rotation is not unique."""


class DegenerateFrame(DegenerateCloud):
    def __init__(self, frame, reason=""):
        self.frame = frame
        super().__init__(f"degenerate frame {frame}" + (f": {reason}" if reason else ""))


class DegenerateSequence(DegenerateCloud):
    pass


class DegenerateExtent(LiftError):
    pass


class BehindCamera(LiftError):
    def __init__(self, frame, joint):
        self.frame = frame
        self.joint = joint
        super().__init__(f"point behind camera at frame {frame}, joint {joint}")


class Diverged(LiftError):
    pass


class NonFinite(LiftError):
    pass
