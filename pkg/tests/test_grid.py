import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ccdistill.errors import OutOfBounds, ShapeMismatch, TooSmall
from ccdistill.grid import CropRect, DepthGrid, ImageGrid, crop, downsample_pyramid, resize_bilinear, resize_nearest


def ramp4():
    return DepthGrid(np.arange(16, dtype=float).reshape(4, 4))


def test_crop_identity():
    g = ramp4()
    out = crop(g, CropRect(0, 0, 4))
    assert np.array_equal(out.values, g.values)
    assert np.array_equal(out.valid, g.valid)


def test_crop_inner_block():
    out = crop(ramp4(), CropRect(1, 1, 2))
    assert out.values.tolist() == [[5, 6], [9, 10]]


def test_crop_out_of_bounds():
    with pytest.raises(OutOfBounds):
        crop(ramp4(), CropRect(3, 3, 2))


def test_crop_keeps_mask_and_works_on_images():
    valid = np.ones((4, 4), bool)
    valid[1, 2] = False
    g = DepthGrid(np.arange(16.0).reshape(4, 4), valid)
    out = crop(g, CropRect(1, 0, 3))
    assert not out.valid[1, 1] and out.valid.sum() == 8
    img = ImageGrid(np.linspace(0, 1, 48).reshape(4, 4, 3))
    assert crop(img, CropRect(2, 1, 2)).values.shape == (2, 2, 3)


@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_crop_composes(h, w, data):
    side = min(h, w)
    g = DepthGrid(np.arange(h * w, dtype=float).reshape(h, w))
    s1 = data.draw(st.integers(1, side))
    r1 = CropRect(data.draw(st.integers(0, w - s1)), data.draw(st.integers(0, h - s1)), s1)
    s2 = data.draw(st.integers(1, s1))
    r2 = CropRect(data.draw(st.integers(0, s1 - s2)), data.draw(st.integers(0, s1 - s2)), s2)
    assert np.array_equal(crop(crop(g, r1), r2).values, crop(g, r1.offset(r2)).values)


def test_resize_identity_and_centre():
    g = ramp4()
    assert np.array_equal(resize_bilinear(g, 4, 4).values, g.values)
    out = resize_bilinear(DepthGrid([[0.0, 1.0], [2.0, 3.0]]), 3, 3)
    assert out.values[1, 1] == 1.5
    assert out.values[0, 2] == 1.0 and out.values[2, 0] == 2.0


@given(st.floats(-100, 100, allow_nan=False), st.integers(1, 9), st.integers(1, 9))
def test_resize_constant(c, nh, nw):
    out = resize_bilinear(DepthGrid(np.full((3, 5), c)), nh, nw)
    assert np.allclose(out.values, c, rtol=0, atol=1e-12 * (1 + abs(c)))


@given(st.integers(2, 8), st.integers(2, 8), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_resize_preserves_bounds(h, w, nh, nw, seed):
    v = np.random.default_rng(seed).normal(size=(h, w))
    out = resize_bilinear(DepthGrid(v), nh, nw)
    assert out.values.min() >= v.min() - 1e-12
    assert out.values.max() <= v.max() + 1e-12


def test_resize_invalid_propagates_strictly():
    valid = np.ones((3, 3), bool)
    valid[1, 1] = False
    out = resize_bilinear(DepthGrid(np.ones((3, 3)), valid), 5, 5)
    # output pixel (2,2) sits exactly on the invalid source pixel; its neighbours touch it too
    assert not out.valid[2, 2] and not out.valid[1, 1]
    assert out.valid[0, 0] and out.valid[4, 4]


def test_resize_nearest_mask():
    m = np.array([[True, False], [False, True]])
    assert resize_nearest(m, 2, 2).tolist() == m.tolist()
    assert resize_nearest(m, 3, 3).shape == (3, 3)


def test_pyramid_examples():
    g = DepthGrid([[1.0, 1.0], [3.0, 3.0]])
    assert downsample_pyramid(g, 1) == [g]
    lv = downsample_pyramid(g, 2)
    assert lv[1].values.tolist() == [[2.0]]
    masked = DepthGrid([[1.0, 0.0], [3.0, 3.0]], [[True, False], [True, True]])
    assert downsample_pyramid(masked, 2)[1].values[0, 0] == pytest.approx(7.0 / 3.0, abs=1e-15)


def test_pyramid_too_small():
    with pytest.raises(TooSmall):
        downsample_pyramid(ramp4(), 4)


def test_grid_validation():
    with pytest.raises(ShapeMismatch):
        DepthGrid(np.zeros(3))
    with pytest.raises(ValueError):
        DepthGrid([[np.nan, 1.0]], [[True, True]])
    nan_grid = DepthGrid([[np.nan, 1.0]])
    assert nan_grid.valid.tolist() == [[False, True]]
    with pytest.raises(ValueError):
        ImageGrid(np.full((2, 2, 3), 1.5))
    with pytest.raises(ShapeMismatch):
        ImageGrid(np.zeros((2, 2, 2)))


def test_grids_are_immutable():
    g = ramp4()
    with pytest.raises(ValueError):
        g.values[0, 0] = 1.0
