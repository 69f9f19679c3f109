"""Hot inner loops, each in two flavours.

Every kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature and the same result up to floating point summation order.
The numba path is used unless numba is missing or ``CCDISTILL_DISABLE_NUMBA``
is set to a non-empty value other than ``0``.  Both implementations stay
importable (``numpy_kernels`` / ``numba_kernels``) so tests and the benchmark
can compare them directly.

Layout conventions: images are ``(B, H, W, C)`` channels-last, float32 or float64.
Im2col columns are ordered ``(ky, kx, c)`` for a 3x3 window with reflect
padding of one pixel (mirror without repeating the edge, like
``np.pad(mode="reflect")``).
"""

import os
import types

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_disabled():
    flag = os.environ.get("CCDISTILL_DISABLE_NUMBA", "")
    return flag not in ("", "0")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def _np_im2col_reflect(x):
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")
    blocks = [xp[:, ky:ky + h, kx:kx + w, :] for ky in range(3) for kx in range(3)]
    return np.concatenate(blocks, axis=3).reshape(b * h * w, 9 * c)


def _np_col2im_reflect(dcols, b, h, w, c):
    d = dcols.reshape(b, h, w, 9 * c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    k = 0
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + h, kx:kx + w, :] += d[..., k * c:(k + 1) * c]
            k += 1
    # fold the mirrored border back onto the pixels it was copied from
    rows = dxp[:, 1:h + 1, :, :].copy()
    rows[:, 1] += dxp[:, 0]
    rows[:, h - 2] += dxp[:, h + 1]
    out = rows[:, :, 1:w + 1, :].copy()
    out[:, :, 1] += rows[:, :, 0]
    out[:, :, w - 2] += rows[:, :, w + 1]
    return out


def _np_col2im_outer_reflect(g, wv, b, h, w, c):
    return _np_col2im_reflect(g.reshape(-1, 1) * wv, b, h, w, c)


def _np_group_median_mad(values, labels, n_groups):
    counts = np.bincount(labels, minlength=n_groups).astype(np.int64)
    order = np.lexsort((values, labels))
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    med = np.full(n_groups, np.nan)
    lo_idx = np.full(n_groups, -1, dtype=np.int64)
    hi_idx = np.full(n_groups, -1, dtype=np.int64)
    has = counts > 0
    lo_idx[has] = order[starts[has] + (counts[has] - 1) // 2]
    hi_idx[has] = order[starts[has] + counts[has] // 2]
    med[has] = 0.5 * (values[lo_idx[has]] + values[hi_idx[has]])
    dev = np.abs(values - med[labels])
    sums = np.bincount(labels, weights=dev, minlength=n_groups)
    mad = np.full(n_groups, np.nan)
    mad[has] = sums[has] / counts[has]
    return med, mad, counts, lo_idx, hi_idx


def _np_pool2x2_masked(values, valid):
    h2, w2 = values.shape[0] // 2, values.shape[1] // 2
    v = np.where(valid, values, 0.0)[: 2 * h2, : 2 * w2]
    m = valid[: 2 * h2, : 2 * w2].astype(np.float64)
    s = v.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    n = m.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    out_valid = n > 0
    out = np.zeros((h2, w2))
    out[out_valid] = s[out_valid] / n[out_valid]
    return out, out_valid


numpy_kernels = types.SimpleNamespace(
    im2col_reflect=_np_im2col_reflect,
    col2im_reflect=_np_col2im_reflect,
    col2im_outer_reflect=_np_col2im_outer_reflect,
    group_median_mad=_np_group_median_mad,
    pool2x2_masked=_np_pool2x2_masked,
)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _reflect(i, n):
        if i < 0:
            return -i
        if i > n - 1:
            return 2 * (n - 1) - i
        return i

    @njit(cache=True)
    def _nb_im2col_reflect(x):
        b, h, w, c = x.shape
        cols = np.empty((b, h, w, 9 * c), dtype=x.dtype)
        for bi in range(b):
            for y in range(h):
                for dy in range(3):
                    src = x[bi, _reflect(y + dy - 1, h)]
                    for xx in range(w):
                        for dx in range(3):
                            sx = _reflect(xx + dx - 1, w)
                            base = (dy * 3 + dx) * c
                            for ci in range(c):
                                cols[bi, y, xx, base + ci] = src[sx, ci]
        return cols.reshape(b * h * w, 9 * c)

    @njit(cache=True)
    def _nb_col2im_reflect(dcols, b, h, w, c):
        d = dcols.reshape(b, h, w, 9 * c)
        out = np.zeros((b, h, w, c), dtype=dcols.dtype)
        for bi in range(b):
            for y in range(h):
                for dy in range(3):
                    dst = out[bi, _reflect(y + dy - 1, h)]
                    for xx in range(w):
                        for dx in range(3):
                            sx = _reflect(xx + dx - 1, w)
                            base = (dy * 3 + dx) * c
                            for ci in range(c):
                                dst[sx, ci] += d[bi, y, xx, base + ci]
        return out

    @njit(cache=True)
    def _nb_col2im_outer_reflect(g, wv, b, h, w, c):
        # col2im of the rank-one columns g[p] * wv[k] without materializing them
        gg = g.reshape(b, h, w)
        out = np.zeros((b, h, w, c), dtype=g.dtype)
        for bi in range(b):
            for y in range(h):
                for dy in range(3):
                    dst = out[bi, _reflect(y + dy - 1, h)]
                    for xx in range(w):
                        gv = gg[bi, y, xx]
                        for dx in range(3):
                            sx = _reflect(xx + dx - 1, w)
                            base = (dy * 3 + dx) * c
                            for ci in range(c):
                                dst[sx, ci] += gv * wv[base + ci]
        return out

    @njit(cache=True)
    def _key_less(va, ia, vb, ib):
        return va < vb or (va == vb and ia < ib)

    @njit(cache=True)
    def _select_kth(v, ix, k):
        """Quickselect on (value, index) keys; afterwards slot ``k`` holds the k-th key."""
        lo, hi = 0, v.shape[0] - 1
        while hi > lo:
            mid = (lo + hi) // 2
            # median-of-three pivot, moved to ``hi``
            if _key_less(v[mid], ix[mid], v[lo], ix[lo]):
                v[mid], v[lo] = v[lo], v[mid]
                ix[mid], ix[lo] = ix[lo], ix[mid]
            if _key_less(v[hi], ix[hi], v[lo], ix[lo]):
                v[hi], v[lo] = v[lo], v[hi]
                ix[hi], ix[lo] = ix[lo], ix[hi]
            if _key_less(v[mid], ix[mid], v[hi], ix[hi]):
                v[mid], v[hi] = v[hi], v[mid]
                ix[mid], ix[hi] = ix[hi], ix[mid]
            pv, pi = v[hi], ix[hi]
            store = lo
            for j in range(lo, hi):
                if _key_less(v[j], ix[j], pv, pi):
                    v[j], v[store] = v[store], v[j]
                    ix[j], ix[store] = ix[store], ix[j]
                    store += 1
            v[hi], v[store] = v[store], v[hi]
            ix[hi], ix[store] = ix[store], ix[hi]
            if store == k:
                return
            if store < k:
                lo = store + 1
            else:
                hi = store - 1

    @njit(cache=True)
    def _nb_group_median_mad(values, labels, n_groups):
        n = values.shape[0]
        counts = np.zeros(n_groups, dtype=np.int64)
        for i in range(n):
            counts[labels[i]] += 1
        starts = np.zeros(n_groups, dtype=np.int64)
        for g in range(1, n_groups):
            starts[g] = starts[g - 1] + counts[g - 1]
        fill = starts.copy()
        gv = np.empty(n)
        gi = np.empty(n, dtype=np.int64)
        for i in range(n):
            g = labels[i]
            gv[fill[g]] = values[i]
            gi[fill[g]] = i
            fill[g] += 1
        med = np.full(n_groups, np.nan)
        mad = np.full(n_groups, np.nan)
        lo_idx = np.full(n_groups, -1, dtype=np.int64)
        hi_idx = np.full(n_groups, -1, dtype=np.int64)
        for g in range(n_groups):
            cnt = counts[g]
            if cnt == 0:
                continue
            v = gv[starts[g]:starts[g] + cnt]
            ix = gi[starts[g]:starts[g] + cnt]
            k = (cnt - 1) // 2
            _select_kth(v, ix, k)
            lo_v, lo_i = v[k], ix[k]
            hi_v, hi_i = lo_v, lo_i
            if cnt % 2 == 0:
                # upper middle: smallest key right of the selected slot
                hi_v, hi_i = v[k + 1], ix[k + 1]
                for j in range(k + 2, cnt):
                    if _key_less(v[j], ix[j], hi_v, hi_i):
                        hi_v, hi_i = v[j], ix[j]
            m = 0.5 * (lo_v + hi_v)
            acc = 0.0
            for j in range(cnt):
                acc += abs(v[j] - m)
            med[g] = m
            mad[g] = acc / cnt
            lo_idx[g] = lo_i
            hi_idx[g] = hi_i
        return med, mad, counts, lo_idx, hi_idx

    @njit(cache=True)
    def _nb_pool2x2_masked(values, valid):
        h2 = values.shape[0] // 2
        w2 = values.shape[1] // 2
        out = np.zeros((h2, w2))
        out_valid = np.zeros((h2, w2), dtype=np.bool_)
        for i in range(h2):
            for j in range(w2):
                s = 0.0
                cnt = 0
                for di in range(2):
                    for dj in range(2):
                        if valid[2 * i + di, 2 * j + dj]:
                            s += values[2 * i + di, 2 * j + dj]
                            cnt += 1
                if cnt > 0:
                    out[i, j] = s / cnt
                    out_valid[i, j] = True
        return out, out_valid

    numba_kernels = types.SimpleNamespace(
        im2col_reflect=_nb_im2col_reflect,
        col2im_reflect=_nb_col2im_reflect,
        col2im_outer_reflect=_nb_col2im_outer_reflect,
        group_median_mad=_nb_group_median_mad,
        pool2x2_masked=_nb_pool2x2_masked,
    )
else:  # pragma: no cover
    numba_kernels = None


active = numba_kernels if USE_NUMBA else numpy_kernels
BACKEND = "numba" if USE_NUMBA else "numpy"


def _float_array(a):
    a = np.asarray(a)
    return np.ascontiguousarray(a, dtype=a.dtype if a.dtype in (np.float32, np.float64) else np.float64)


def im2col_reflect(x):
    """Float32 input stays float32; anything else is computed in float64."""
    return active.im2col_reflect(_float_array(x))


def col2im_reflect(dcols, b, h, w, c):
    return active.col2im_reflect(_float_array(dcols), b, h, w, c)


def col2im_outer_reflect(g, wv, b, h, w, c):
    """``col2im_reflect`` of the outer product of a per-pixel scalar ``g`` and a column vector ``wv``."""
    g = _float_array(g)
    return active.col2im_outer_reflect(g.ravel(), np.ascontiguousarray(wv, dtype=g.dtype), b, h, w, c)


def group_median_mad(values, labels, n_groups):
    """Per-group median (mean of middle pair for even counts) and mean absolute deviation.

    Returns ``(median, mad, counts, lo_idx, hi_idx)`` where ``lo_idx``/``hi_idx``
    index the order statistics that form each median (equal for odd counts).
    Ties are broken by position, so the choice is deterministic.
    """
    return active.group_median_mad(
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(labels, dtype=np.int64),
        int(n_groups),
    )


def pool2x2_masked(values, valid):
    return active.pool2x2_masked(
        np.ascontiguousarray(values, dtype=np.float64), np.ascontiguousarray(valid, dtype=np.bool_)
    )
