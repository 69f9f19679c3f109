"""PFM / PGM / PPM readers and writers.

PFM stores float32 rows bottom-to-top; a negative scale in the header marks
little-endian data.  Invalid depth pixels are written as NaN and come back as
invalid.  16-bit PGM stores a quantized depth map; the value range used for
quantization travels in a header comment so the reader can undo it, and code 0
marks invalid pixels.
"""

import re

import numpy as np

from .errors import FormatError
from .grid import DepthGrid, ImageGrid

_PGM_RANGE = re.compile(rb"#\s*ccdistill-range\s+(\S+)\s+(\S+)")


def _read_token_lines(f, n):
    """Read header lines until ``n`` whitespace tokens are collected (skipping comments)."""
    tokens, comments = [], []
    while len(tokens) < n:
        line = f.readline()
        if not line:
            raise FormatError("truncated header")
        if line.startswith(b"#"):
            comments.append(line)
            continue
        tokens.extend(line.split())
    return tokens, comments


def write_pfm(path, grid, little_endian=True):
    if isinstance(grid, DepthGrid):
        data = np.where(grid.valid, grid.values, np.nan).astype(np.float32)
        ident = b"Pf"
    else:
        data = np.asarray(grid, dtype=np.float32)
        ident = b"PF" if data.ndim == 3 else b"Pf"
    h, w = data.shape[:2]
    scale = -1.0 if little_endian else 1.0
    dt = np.dtype("<f4" if little_endian else ">f4")
    with open(path, "wb") as f:
        f.write(ident + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(f"{scale}\n".encode())
        f.write(np.flipud(data).astype(dt).tobytes())


def read_pfm_array(path):
    """Return the raw float32 array (``(H, W)`` or ``(H, W, 3)``) and the header scale."""
    with open(path, "rb") as f:
        ident = f.readline().strip()
        if ident not in (b"Pf", b"PF"):
            raise FormatError(f"{path}: not a PFM file (magic {ident!r})")
        (w, h), _ = _read_token_lines(f, 2)
        (scale,), _ = _read_token_lines(f, 1)
        try:
            w, h, scale = int(w), int(h), float(scale)
        except ValueError as exc:
            raise FormatError(f"{path}: bad PFM header") from exc
        channels = 3 if ident == b"PF" else 1
        dt = np.dtype("<f4" if scale < 0 else ">f4")
        raw = f.read()
    count = w * h * channels
    if len(raw) < count * 4:
        raise FormatError(f"{path}: expected {count} samples, file is short")
    data = np.frombuffer(raw[: count * 4], dtype=dt).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).copy(), abs(scale)


def read_pfm(path):
    data, _ = read_pfm_array(path)
    if data.ndim == 3:
        raise FormatError(f"{path}: colour PFM where a depth map was expected")
    return DepthGrid(data.astype(np.float64), np.isfinite(data))


def write_pgm16(path, grid, vmin=None, vmax=None):
    """Quantize valid pixels of ``grid`` into codes 1..65535 and write a P5 file."""
    vals = grid.values[grid.valid]
    lo = float(vals.min()) if vmin is None else float(vmin)
    hi = float(vals.max()) if vmax is None else float(vmax)
    if hi <= lo:
        hi = lo + 1.0
    q = np.zeros(grid.shape, dtype=np.int64)
    t = (np.clip(grid.values, lo, hi) - lo) / (hi - lo)
    q[grid.valid] = np.rint(t[grid.valid] * 65534).astype(np.int64) + 1
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(b"P5\n")
        f.write(f"# ccdistill-range {lo!r} {hi!r}\n".encode())
        f.write(f"{w} {h}\n65535\n".encode())
        f.write(q.astype(">u2").tobytes())


def pgm16_step(vmin, vmax):
    """Quantization step of :func:`write_pgm16` for a given range."""
    return (vmax - vmin) / 65534


def read_pgm16(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise FormatError(f"{path}: not a binary PGM")
        (w, h, maxval), comments = _read_token_lines(f, 3)
        w, h, maxval = int(w), int(h), int(maxval)
        raw = f.read()
    dt = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dt).itemsize
    if len(raw) < n:
        raise FormatError(f"{path}: pixel data is short")
    q = np.frombuffer(raw[:n], dtype=dt).reshape(h, w).astype(np.int64)
    rng = None
    for c in comments:
        m = _PGM_RANGE.match(c)
        if m:
            rng = float(m.group(1)), float(m.group(2))
    if rng is None:
        # foreign file: plain codes, nothing invalid
        return DepthGrid(q.astype(np.float64))
    lo, hi = rng
    valid = q > 0
    vals = np.where(valid, lo + (q - 1) / 65534 * (hi - lo), 0.0)
    return DepthGrid(vals, valid)


def write_ppm(path, image):
    """Write an 8-bit P6 file from an :class:`ImageGrid` or a uint8 ``(H, W, 3)`` array."""
    if isinstance(image, ImageGrid):
        arr = image.values
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        arr = np.rint(arr * 255).astype(np.uint8)
    else:
        arr = np.asarray(image, dtype=np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(arr).tobytes())


def read_ppm_array(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise FormatError(f"{path}: not a binary PPM")
        (w, h, maxval), _ = _read_token_lines(f, 3)
        w, h = int(w), int(h)
        if int(maxval) != 255:
            raise FormatError(f"{path}: only 8-bit PPM is supported")
        raw = f.read()
    if len(raw) < w * h * 3:
        raise FormatError(f"{path}: pixel data is short")
    return np.frombuffer(raw[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm(path):
    return ImageGrid(read_ppm_array(path) / 255.0)
