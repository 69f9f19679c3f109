import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ccdistill import _kernels as K

pytestmark = pytest.mark.skipif(K.numba_kernels is None, reason="numba not installed")
NP, NB = K.numpy_kernels, K.numba_kernels

shapes = st.tuples(st.integers(1, 3), st.integers(2, 9), st.integers(2, 9), st.integers(1, 4))


@given(shapes, st.integers(0, 2**32 - 1))
def test_im2col_backends_agree(shape, seed):
    x = np.random.default_rng(seed).normal(size=shape)
    assert np.array_equal(NP.im2col_reflect(x), NB.im2col_reflect(x))


@given(shapes, st.integers(0, 2**32 - 1))
def test_col2im_is_adjoint_and_backends_agree(shape, seed):
    b, h, w, c = shape
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    y = rng.normal(size=(b * h * w, 9 * c))
    back = NP.col2im_reflect(y, b, h, w, c)
    assert np.allclose(back, NB.col2im_reflect(y, b, h, w, c), atol=1e-12)
    assert np.isclose(np.vdot(NP.im2col_reflect(x), y), np.vdot(x, back), rtol=1e-10)


@given(shapes, st.integers(0, 2**32 - 1))
def test_col2im_outer_matches_dense(shape, seed):
    b, h, w, c = shape
    rng = np.random.default_rng(seed)
    g, wv = rng.normal(size=b * h * w), rng.normal(size=9 * c)
    dense = NP.col2im_reflect(np.outer(g, wv), b, h, w, c)
    assert np.allclose(NP.col2im_outer_reflect(g, wv, b, h, w, c), dense, atol=1e-12)
    assert np.allclose(NB.col2im_outer_reflect(g, wv, b, h, w, c), dense, atol=1e-12)


@given(st.integers(1, 60), st.integers(1, 5), st.integers(0, 2**32 - 1), st.booleans())
def test_group_median_mad_backends_agree(n, groups, seed, ties):
    rng = np.random.default_rng(seed)
    values = rng.integers(0, 4, n).astype(float) if ties else rng.normal(size=n)
    labels = rng.integers(0, groups, n)
    a, b = NP.group_median_mad(values, labels, groups), NB.group_median_mad(values, labels, groups)
    np.testing.assert_array_equal(a[2], b[2])
    np.testing.assert_array_equal(a[3], b[3])
    np.testing.assert_array_equal(a[4], b[4])
    np.testing.assert_allclose(a[0], b[0], atol=0, equal_nan=True)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12, equal_nan=True)
    for g in range(groups):
        sel = values[labels == g]
        if sel.size:
            assert a[0][g] == np.median(sel)
            assert a[1][g] == pytest.approx(np.mean(np.abs(sel - np.median(sel))), abs=1e-12)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_pool_backends_agree(h, w, seed):
    rng = np.random.default_rng(seed)
    v, m = rng.normal(size=(h, w)), rng.random((h, w)) < 0.6
    (a, am), (b, bm) = NP.pool2x2_masked(v, m), NB.pool2x2_masked(v, m)
    assert np.array_equal(am, bm)
    assert np.allclose(a, b, atol=1e-12)


def _backend(flag):
    env = dict(os.environ)
    env.pop("CCDISTILL_DISABLE_NUMBA", None)
    if flag is not None:
        env["CCDISTILL_DISABLE_NUMBA"] = flag
    code = "from ccdistill import _kernels; print(_kernels.BACKEND)"
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.strip()


def test_environment_flag_selects_backend():
    assert _backend(None) == "numba"
    assert _backend("0") == "numba"
    assert _backend("1") == "numpy"
