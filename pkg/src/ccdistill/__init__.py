"""Cross-context depth distillation on a synthetic desk-scale harness.

Subpackages are plain modules; the most common entry points are re-exported
here for convenience.
"""

from .errors import CCDistillError
from .grid import CropRect, DepthGrid, ImageGrid
from .metrics import MetricPair, evaluate, fit_scale_shift
from .normalize import NormStrategy

__version__ = "0.1.0"

__all__ = [
    "CCDistillError",
    "CropRect",
    "DepthGrid",
    "ImageGrid",
    "MetricPair",
    "NormStrategy",
    "evaluate",
    "fit_scale_shift",
    "__version__",
]
