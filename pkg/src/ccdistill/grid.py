"""Dense 2-D grids, crops, resampling and pyramids.

Storage is row-major and indexing is ``(row, col) == (y, x)`` everywhere.
Grids are immutable: constructors copy their inputs and mark them read-only.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import EmptyGrid, OutOfBounds, ShapeMismatch, TooSmall


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DepthGrid:
    """Single-channel depth (or prediction) field with a validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __init__(self, values, valid=None):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeMismatch(f"depth values must be 2-D, got shape {values.shape}")
        if valid is None:
            valid = np.isfinite(values)
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != values.shape:
            raise ShapeMismatch(f"mask shape {valid.shape} != values shape {values.shape}")
        if not np.all(np.isfinite(values[valid])):
            raise ValueError("non-finite value at a valid pixel")
        object.__setattr__(self, "values", _frozen(values, np.float64))
        object.__setattr__(self, "valid", _frozen(valid, bool))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_valid(self):
        return int(self.valid.sum())

    def filled(self, fill=np.nan):
        """Values with invalid pixels replaced by ``fill`` (a writable copy)."""
        return np.where(self.valid, self.values, fill)

    def with_values(self, values):
        return DepthGrid(values, self.valid)


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Image with 1 or 3 channels, values in [0, 1], stored ``(H, W, C)``."""

    values: np.ndarray

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3 or values.shape[2] not in (1, 3):
            raise ShapeMismatch(f"image must be (H, W, 1|3), got {values.shape}")
        if not np.all(np.isfinite(values)) or values.min(initial=0.0) < 0 or values.max(initial=0.0) > 1:
            raise ValueError("image values must be finite and within [0, 1]")
        object.__setattr__(self, "values", _frozen(values, np.float64))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class CropRect:
    """Square crop: top-left corner ``(x0, y0)`` and side length in pixels."""

    x0: int
    y0: int
    side: int

    def __post_init__(self):
        if self.x0 < 0 or self.y0 < 0:
            raise OutOfBounds(f"negative crop origin {self}")
        if self.side < 1:
            raise ValueError(f"crop side must be positive, got {self.side}")

    def fits(self, height, width):
        return self.x0 + self.side <= width and self.y0 + self.side <= height

    def offset(self, other):
        """``other`` is relative to this rect; return it in this rect's parent frame."""
        return CropRect(self.x0 + other.x0, self.y0 + other.y0, other.side)

    def contains(self, other):
        return (
            other.x0 >= self.x0
            and other.y0 >= self.y0
            and other.x0 + other.side <= self.x0 + self.side
            and other.y0 + other.side <= self.y0 + self.side
        )


def crop(grid, rect):
    h, w = grid.values.shape[:2]
    if not rect.fits(h, w):
        raise OutOfBounds(f"{rect} does not fit in a {h}x{w} grid")
    ys = slice(rect.y0, rect.y0 + rect.side)
    xs = slice(rect.x0, rect.x0 + rect.side)
    if isinstance(grid, ImageGrid):
        return ImageGrid(grid.values[ys, xs])
    return DepthGrid(grid.values[ys, xs], grid.valid[ys, xs])


def bilinear_matrix(coords, n):
    """Row-stochastic matrix sampling a length-``n`` signal at real ``coords``.

    Coordinates are clamped to ``[0, n - 1]``.  Row ``i`` holds the two linear
    interpolation weights for ``coords[i]``.
    """
    coords = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n - 1)
    lo = np.floor(coords).astype(np.int64)
    lo = np.minimum(lo, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    m = np.zeros((coords.size, n))
    rows = np.arange(coords.size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def corner_coords(n_out, n_in):
    """Source coordinates of ``n_out`` corner-aligned samples over ``n_in`` pixels."""
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize_matrices(h, w, new_h, new_w):
    return (
        bilinear_matrix(corner_coords(new_h, h), h),
        bilinear_matrix(corner_coords(new_w, w), w),
    )


def apply_separable(ry, rx, a):
    """``ry @ a @ rx.T`` applied to each channel of ``a`` (2-D or ``(H, W, C)``)."""
    if a.ndim == 2:
        return ry @ a @ rx.T
    h, w, c = a.shape
    return rx @ (ry @ a.reshape(h, w * c)).reshape(-1, w, c)


def apply_separable_adjoint(ry, rx, g):
    """Adjoint of :func:`apply_separable`: ``ry.T @ g @ rx`` per channel."""
    if g.ndim == 2:
        return ry.T @ g @ rx
    i, _, c = g.shape
    t = rx.T @ g
    return (ry.T @ t.reshape(i, -1)).reshape(ry.shape[1], rx.shape[1], c)


def resize_bilinear(grid, new_h, new_w):
    """Corner-aligned bilinear resize.

    For depth grids an output pixel is valid only if every source pixel with
    non-zero weight is valid.
    """
    h, w = grid.values.shape[:2]
    if h == 0 or w == 0:
        raise EmptyGrid("cannot resize an empty grid")
    if new_h < 1 or new_w < 1:
        raise ValueError("target dims must be positive")
    if (new_h, new_w) == (h, w):
        return grid
    ry, rx = resize_matrices(h, w, new_h, new_w)
    if isinstance(grid, ImageGrid):
        return ImageGrid(np.clip(apply_separable(ry, rx, grid.values), 0.0, 1.0))
    vals = apply_separable(ry, rx, np.where(grid.valid, grid.values, 0.0))
    bad = (ry > 0).astype(np.float64) @ (~grid.valid).astype(np.float64) @ (rx > 0).T.astype(np.float64)
    valid = bad == 0
    return DepthGrid(np.where(valid, vals, 0.0), valid)


def resize_nearest(mask, new_h, new_w):
    """Nearest-neighbour resize of a boolean (or any) 2-D array, corner aligned."""
    mask = np.asarray(mask)
    h, w = mask.shape[:2]
    yi = np.rint(corner_coords(new_h, h)).astype(np.int64)
    xi = np.rint(corner_coords(new_w, w)).astype(np.int64)
    return mask[yi][:, xi]


def downsample_pyramid(grid, levels):
    """Level 0 is ``grid``; each further level is a masked 2x2 mean (floor dims)."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = grid.shape
    need = 2 ** (levels - 1)
    if h < need or w < need:
        raise TooSmall(f"{h}x{w} grid too small for {levels} pyramid levels")
    out = [grid]
    for _ in range(levels - 1):
        prev = out[-1]
        vals, valid = _kernels.pool2x2_masked(prev.values, prev.valid)
        if vals.size == 0:
            raise TooSmall("pyramid level would have zero area")
        out.append(DepthGrid(vals, valid))
    return out
