"""Exception hierarchy shared by every block.

All domain failures derive from :class:`SceneKitError`; the CLI maps them to
exit code 1.
"""


class SceneKitError(Exception):
    """Base class for domain errors."""


class NonPositiveDepth(SceneKitError, ValueError):
    pass


class NonPositiveInverseDepth(SceneKitError, ValueError):
    pass


class SizeMismatch(SceneKitError, ValueError):
    pass


class DegenerateGeometry(SceneKitError):
    pass


class InsufficientConstraints(SceneKitError):
    pass


class InsufficientLandmarks(SceneKitError):
    pass


class NoObservations(SceneKitError):
    pass


class NumericalFailure(SceneKitError):
    pass


class EmptyLevel(SceneKitError):
    pass


class EmptyOverlap(SceneKitError, ValueError):
    pass


class IndexOutOfRange(SceneKitError, IndexError):
    pass


class UnsatisfiableRequest(SceneKitError):
    pass


class PartFailure(SceneKitError):
    """A product-line part raised; carries the part name and frame id."""

    def __init__(self, part: str, frame_id: int | None, cause: BaseException):
        self.part = part
        self.frame_id = frame_id
        self.cause = cause
        where = f" at frame {frame_id}" if frame_id is not None else ""
        super().__init__(f"part '{part}' failed{where}: {cause}")
