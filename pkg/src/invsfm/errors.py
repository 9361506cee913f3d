"""Exception types raised across the toolkit.

Everything derives from :class:`InvSfmError` so callers (and the CLI) can
separate input problems from programming errors.
"""


class InvSfmError(Exception):
    """Base class for all toolkit errors."""


# -- colmap-io ---------------------------------------------------------------

class MissingFile(InvSfmError, FileNotFoundError):
    pass


class MalformedRecord(InvSfmError, ValueError):
    """A record could not be decoded.

    ``location`` is a human readable position, e.g. ``"line 12"`` or
    ``"byte 4096"``.
    """

    def __init__(self, path, location, reason):
        self.path = str(path)
        self.location = location
        self.reason = reason
        super().__init__(f"{self.path}:{location}: {reason}")


class DanglingReference(InvSfmError, ValueError):
    pass


class UnsupportedCameraModel(InvSfmError, ValueError):
    pass


class IoFailure(InvSfmError, OSError):
    pass


class TruncatedRecord(InvSfmError, ValueError):
    pass


class DuplicatePointId(InvSfmError, ValueError):
    pass


# -- scene-renderer / visibility ---------------------------------------------

class MissingAttribute(InvSfmError, ValueError):
    pass


class EmptyKeypointSet(InvSfmError, ValueError):
    pass


class DimensionMismatch(InvSfmError, ValueError):
    pass


class UnknownImageId(InvSfmError, KeyError):
    pass


# -- nn-core / networks --------------------------------------------------------

class ShapeMismatch(InvSfmError, ValueError):
    pass


class NoForwardTrace(InvSfmError, RuntimeError):
    pass


class DegenerateBatch(InvSfmError, ValueError):
    pass


class BadDimensions(InvSfmError, ValueError):
    pass


class StageOrderViolation(InvSfmError, RuntimeError):
    pass


class DivergedLoss(InvSfmError, FloatingPointError):
    pass


# -- eval-harness -------------------------------------------------------------

class TooSmall(InvSfmError, ValueError):
    pass


class OccupancyMismatch(InvSfmError, ValueError):
    pass
