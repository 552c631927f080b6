"""Exceptions and warning categories raised across the package."""


class StereoBoxError(Exception):
    """Base class for all package errors."""


class BehindCamera(StereoBoxError):
    """A box corner lies at or behind the minimum depth of a camera."""


class AmbiguousVertex(StereoBoxError):
    """Two bottom vertices are equidistant from the camera (strict mode only)."""


class NonPositiveDisparity(StereoBoxError):
    """The right-image box center is not left of the left-image box center."""


class DivergedSolution(StereoBoxError):
    """Gauss-Newton could not find a descending step even with damping."""


class NonPositiveDepth(StereoBoxError):
    pass


class UnderconstrainedSystem(StereoBoxError):
    """Fewer than four observation rows survived truncation filtering."""


class NonFiniteInput(StereoBoxError, ValueError):
    pass


class InfeasiblePlacement(StereoBoxError):
    pass


class MalformedLine(StereoBoxError, ValueError):
    """A KITTI line has the wrong field count or an unparseable field."""

    def __init__(self, field_count, line="", field_index=None):
        self.field_count = field_count
        self.field_index = field_index
        if field_index is None:
            msg = f"expected 15 or 16 fields, got {field_count}: {line!r}"
        else:
            msg = f"field {field_index} is not a number: {line!r}"
        super().__init__(msg)


class DegenerateCalibration(StereoBoxError, ValueError):
    pass


# Conditions that are reported but do not stop processing.
class DegenerateBox(UserWarning):
    """Gaussian sigma fell below the floor and was clamped."""


class EmptyBatch(UserWarning):
    """A loss was requested with no valid cells; 0 is returned."""


class FlatCost(UserWarning):
    """Photometric cost curve carries no signal; the initial depth is kept."""


class AlphaMismatch(UserWarning):
    """A label's alpha disagrees with its rotation_y and bearing."""


class ExtentOutOfRange(UserWarning):
    """A box extent fell outside the occlusion buffer and was clamped."""
