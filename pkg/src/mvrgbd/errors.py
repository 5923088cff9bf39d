"""Exception types shared across the library."""


class MVRGBDError(Exception):
    """Base class for all library errors."""


class BehindCamera(MVRGBDError):
    """Point has non-positive depth in the camera frame."""


class NonPositiveDepth(MVRGBDError):
    """Unprojection requested at depth <= 0."""


class OutOfBounds(MVRGBDError):
    """Pixel coordinate outside the image."""


class DegenerateRay(MVRGBDError):
    """Ray endpoints coincide; direction undefined."""


class ShapeMismatch(MVRGBDError):
    """Array arguments have incompatible shapes."""


class StepOutOfRange(MVRGBDError):
    """Diffusion step index outside 1..T."""


class InvalidBounds(MVRGBDError):
    """near/far depth bounds are not an increasing pair."""


class InvalidRadius(MVRGBDError):
    """Camera rig radius does not clear the unit scene sphere."""


class CorruptManifest(MVRGBDError):
    """Dataset manifest failed validation; message names the field."""


class EmptyCloud(MVRGBDError):
    """Point cloud operation received no points."""


class NonFiniteLoss(MVRGBDError):
    """Training loss became NaN/inf; message carries the step index."""


class TooSmall(MVRGBDError):
    """Image smaller than the metric's local window."""


class ConfigError(MVRGBDError):
    """Bad config file key or value."""

class CorruptCheckpoint(MVRGBDError):
    """Checkpoint file failed magic/shape validation; message says where."""


class NoOverlap(MVRGBDError):
    """No cross-view correspondence survived the occlusion test."""
