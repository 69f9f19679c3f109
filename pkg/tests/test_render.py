import numpy as np
import pytest

from ccdistill.grid import DepthGrid
from ccdistill.io import read_ppm_array, write_pfm
from ccdistill.render import colorize, palette_lookup, render_pfm

# hand interpolation of the documented viridis anchors at t = 0, 1/3, 2/3, 1
RAMP_VIRIDIS = [(68, 1, 84), (50, 103, 139), (74, 182, 112), (253, 231, 37)]


def test_ramp_against_table():
    rgb = colorize(DepthGrid(np.array([[1.0, 2.0, 3.0, 4.0]])))
    assert rgb.shape == (1, 4, 3)
    assert [tuple(int(v) for v in px) for px in rgb[0]] == RAMP_VIRIDIS


def test_ramp_gray():
    rgb = colorize(DepthGrid(np.array([[0.0, 1.0]])), "gray")
    assert rgb[0].tolist() == [[32, 32, 32], [255, 255, 255]]


def test_constant_is_mid_palette():
    rgb = colorize(DepthGrid(np.full((3, 5), 2.5)))
    assert (rgb == np.array([33, 145, 140], dtype=np.uint8)).all()


def test_invalid_black_and_excluded_from_range():
    vals = np.array([[1.0, np.nan, 4.0, 1e9]])
    valid = np.array([[True, False, True, False]])
    rgb = colorize(DepthGrid(vals, valid))
    assert rgb[0, 1].tolist() == [0, 0, 0] and rgb[0, 3].tolist() == [0, 0, 0]
    assert rgb[0, 0].tolist() == [68, 1, 84] and rgb[0, 2].tolist() == [253, 231, 37]
    assert colorize(DepthGrid(vals, np.zeros_like(valid))).max() == 0


def test_monotone_traversal():
    t = np.linspace(0, 1, 257)
    lum = palette_lookup(t) @ np.array([0.2126, 0.7152, 0.0722])
    assert np.all(np.diff(lum) > 0)


def test_unknown_palette():
    with pytest.raises(ValueError):
        palette_lookup(0.5, "jet")


def test_render_pfm_roundtrip(tmp_path):
    src, dst = tmp_path / "d.pfm", tmp_path / "d.ppm"
    write_pfm(src, DepthGrid(np.array([[1.0, 2.0, 3.0, 4.0]])))
    render_pfm(src, dst)
    assert [tuple(px) for px in read_ppm_array(dst)[0].tolist()] == RAMP_VIRIDIS
