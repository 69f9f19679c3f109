"""Depth heatmaps.

Valid pixels are min-max normalized to ``t`` in [0, 1] and mapped through a
palette by linear interpolation between anchor colours, then rounded half up
to 8-bit.  A constant map renders at ``t = 0.5``.  Invalid pixels are black.

Palette tables (``t``: R, G, B):

``viridis`` (default)
    0.00: 68, 1, 84 / 0.25: 59, 82, 139 / 0.50: 33, 145, 140 /
    0.75: 94, 201, 98 / 1.00: 253, 231, 37

``gray``
    0.00: 32, 32, 32 / 1.00: 255, 255, 255
"""

import numpy as np

from .io import read_pfm, write_ppm

PALETTES = {
    "viridis": (
        (0.00, (68, 1, 84)),
        (0.25, (59, 82, 139)),
        (0.50, (33, 145, 140)),
        (0.75, (94, 201, 98)),
        (1.00, (253, 231, 37)),
    ),
    "gray": (
        (0.00, (32, 32, 32)),
        (1.00, (255, 255, 255)),
    ),
}
DEFAULT_PALETTE = "viridis"


def palette_lookup(t, palette=DEFAULT_PALETTE):
    """RGB in [0, 255] (float) for positions ``t`` in [0, 1]."""
    if palette not in PALETTES:
        raise ValueError(f"unknown palette {palette!r}; choose from {', '.join(sorted(PALETTES))}")
    table = PALETTES[palette]
    xs = np.array([a for a, _ in table])
    cols = np.array([c for _, c in table], dtype=np.float64)
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(t, xs, cols[:, k]) for k in range(3)], axis=-1)


def colorize(depth, palette=DEFAULT_PALETTE):
    """``(H, W, 3)`` uint8 heatmap of a :class:`DepthGrid`."""
    vals = depth.values
    valid = depth.valid
    out = np.zeros(vals.shape + (3,), dtype=np.uint8)
    if not valid.any():
        return out
    v = vals[valid]
    lo, hi = float(v.min()), float(v.max())
    t = (v - lo) / (hi - lo) if hi > lo else np.full(v.shape, 0.5)
    out[valid] = np.floor(palette_lookup(t, palette) + 0.5).astype(np.uint8)
    return out


def render_pfm(src, dst, palette=DEFAULT_PALETTE):
    """Read a depth PFM and write its heatmap as an 8-bit PPM."""
    rgb = colorize(read_pfm(src), palette)
    write_ppm(dst, rgb)
    return rgb
