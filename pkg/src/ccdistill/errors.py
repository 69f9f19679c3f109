"""Exception types raised across the package."""


class CCDistillError(Exception):
    """Base class for all package errors."""


class OutOfBounds(CCDistillError, ValueError):
    pass


class EmptyGrid(CCDistillError, ValueError):
    pass


class TooSmall(CCDistillError, ValueError):
    pass


class ShapeMismatch(CCDistillError, ValueError):
    pass


class DegenerateDepth(CCDistillError, ValueError):
    """Depth map has (near) zero spread, so it cannot be normalized."""


class TooFewPixels(CCDistillError, ValueError):
    pass


class DisjointMasks(CCDistillError, ValueError):
    pass


class DegeneratePrediction(CCDistillError, ValueError):
    """Prediction has (near) zero variance; least squares alignment is undefined."""


class NoEvaluablePixels(CCDistillError, ValueError):
    pass


class ImageTooSmall(CCDistillError, ValueError):
    pass


class NonFiniteLoss(CCDistillError, FloatingPointError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class GraphMismatch(CCDistillError, ValueError):
    pass


class ConfigError(CCDistillError, ValueError):
    pass


class FormatError(CCDistillError, ValueError):
    """Malformed PFM/PGM/PPM/checkpoint file."""
