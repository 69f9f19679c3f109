"""Depth normalization strategies and the distillation losses built on them.

Four strategies are supported:

``global``  median / mean-absolute-deviation normalization over all joint-valid pixels.
``hybrid``  the same statistic inside depth-range contexts at granularities 1, 2 and 4,
            averaged per pixel over the contexts it belongs to.
``local``   only the finest (4-way) contexts.
``none``    raw L1 regression.

Contexts are always defined from the *teacher* map's depth range (equal-width
bins; a value on an inner edge belongs to the lower bin) and are shared when
indexing both maps; median/MAD statistics are computed per map.

Every loss can also return its gradient with respect to the student map.  The
gradient is the exact almost-everywhere derivative: the median contributes
through the order statistic(s) that realise it, and the MAD through its
mean-absolute term.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateDepth, DisjointMasks, ShapeMismatch, TooFewPixels, TooSmall
from .grid import DepthGrid

GLOBAL = "global"
HYBRID = "hybrid"
LOCAL = "local"
NONE = "none"
KINDS = (GLOBAL, HYBRID, LOCAL, NONE)

_LEVELS = {GLOBAL: (1,), HYBRID: (1, 2, 4), LOCAL: (4,), NONE: ()}


@dataclass(frozen=True)
class NormStrategy:
    kind: str = HYBRID
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown normalization kind {self.kind!r}; expected one of {KINDS}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def levels(self):
        return _LEVELS[self.kind]


@dataclass(frozen=True, eq=False)
class NormContext:
    """Pixel set (flat row-major indices) plus the reference map's statistics on it."""

    pixel_set: np.ndarray
    median: float
    mad: float
    scale_level: int

    def usable(self, eps=1e-6):
        return self.pixel_set.size >= 2 and self.mad > eps


@dataclass
class LossBreakdown:
    dis: float = 0.0
    feat: float = 0.0
    grad: float = 0.0
    total: float = 0.0
    pixels_used: int = 0


def median_mad(x):
    """Median (mean of the middle pair for even counts) and mean absolute deviation."""
    x = np.asarray(x, dtype=np.float64).ravel()
    med, mad, *_ = _kernels.group_median_mad(x, np.zeros(x.size, dtype=np.int64), 1)
    return float(med[0]), float(mad[0])


def normalize_global(d, eps=1e-6):
    vals = d.values[d.valid]
    if vals.size < 2:
        raise TooFewPixels(f"need >= 2 valid pixels, have {vals.size}")
    med, mad = median_mad(vals)
    if mad <= eps:
        raise DegenerateDepth(f"mean absolute deviation {mad:g} <= {eps:g}")
    out = np.where(d.valid, (d.values - med) / mad, 0.0)
    return DepthGrid(out, d.valid)


def bin_labels(values, n_bins, lo, hi):
    """Equal-width bin index of each value over ``[lo, hi]``.

    A value exactly on an inner edge goes to the lower bin; ``lo`` belongs to the
    first bin and ``hi`` to the last.
    """
    if n_bins == 1:
        return np.zeros(np.shape(values), dtype=np.int64)
    edges = lo + (hi - lo) * np.arange(1, n_bins) / n_bins
    return np.searchsorted(edges, values, side="left").astype(np.int64)


def build_hybrid_contexts(d_ref, levels=(1, 2, 4), eps=1e-6):
    idx = np.flatnonzero(d_ref.valid.ravel())
    vals = d_ref.values.ravel()[idx]
    if vals.size < 2:
        raise TooFewPixels(f"need >= 2 valid pixels, have {vals.size}")
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo <= eps:
        raise DegenerateDepth(f"depth range {hi - lo:g} <= {eps:g}")
    contexts = []
    for s in levels:
        lab = bin_labels(vals, s, lo, hi)
        med, mad, counts, _, _ = _kernels.group_median_mad(vals, lab, s)
        for g in range(s):
            if counts[g] >= 2 and mad[g] > eps:
                contexts.append(NormContext(idx[lab == g], float(med[g]), float(mad[g]), s))
    return contexts


class _Level:
    """One granularity: a partition of the joint-valid pixels into contexts."""

    def __init__(self, xs, xt, labels, n_groups, eps):
        self.labels = labels
        self.n_groups = n_groups
        self.xs = xs
        ms, as_, cnt, lo, hi = _kernels.group_median_mad(xs, labels, n_groups)
        mt, at, _, _, _ = _kernels.group_median_mad(xt, labels, n_groups)
        ok = (cnt >= 2) & (as_ > eps) & (at > eps)
        self.ok_group = ok
        self.count = cnt
        self.med_s, self.mad_s = ms, as_
        self.lo_idx, self.hi_idx = lo, hi
        self.used = ok[labels]
        safe_as = np.where(ok, as_, 1.0)
        safe_at = np.where(ok, at, 1.0)
        ms0 = np.where(ok, ms, 0.0)
        mt0 = np.where(ok, mt, 0.0)
        self.ns = np.where(self.used, (xs - ms0[labels]) / safe_as[labels], 0.0)
        self.nt = np.where(self.used, (xt - mt0[labels]) / safe_at[labels], 0.0)

    def _vjp_factors(self):
        # c-independent pieces of the pullback, built on first use
        if not hasattr(self, "_inv_a"):
            lab, g, ok = self.labels, self.n_groups, self.ok_group
            m = np.where(ok, self.med_s, 0.0)
            cnt = np.maximum(self.count, 1)
            sgn = np.sign(self.xs - m[lab])
            sum_sgn = np.bincount(lab, weights=sgn, minlength=g)
            # derivative of the median w.r.t. each pixel: 1/2 to each middle order statistic
            dmed = np.zeros(self.xs.size)
            # groups are disjoint, so each index appears at most once per array
            dmed[self.lo_idx[ok]] += 0.5
            dmed[self.hi_idx[ok]] += 0.5
            self._dmed = dmed
            self._dmad = (sgn - sum_sgn[lab] * dmed) / cnt[lab]
            self._inv_a = np.where(ok, 1.0 / np.where(ok, self.mad_s, 1.0), 0.0)[lab]
        return self._inv_a, self._dmed, self._dmad

    def vjp(self, c):
        """Pull a cotangent on the student's normalized values back to raw student values."""
        inv_a, dmed, dmad = self._vjp_factors()
        lab, g = self.labels, self.n_groups
        c = np.where(self.used, c, 0.0)
        sum_c = np.bincount(lab, weights=c, minlength=g)[lab]
        sum_cn = np.bincount(lab, weights=c * self.ns, minlength=g)[lab]
        return inv_a * (c - dmed * sum_c - dmad * sum_cn)


class PairNormalizer:
    """Shared normalization state for one (student, teacher) pair under a strategy.

    Both the distillation loss and the gradient-matching loss read from the same
    contexts, so statistics are computed once per pair.
    """

    def __init__(self, d_s, d_t, strategy):
        if d_s.shape != d_t.shape:
            raise ShapeMismatch(f"student {d_s.shape} vs teacher {d_t.shape}")
        self.shape = d_s.shape
        self.strategy = strategy
        joint = d_s.valid & d_t.valid
        self.idx = np.flatnonzero(joint.ravel())
        n = self.idx.size
        if n < 2:
            raise DisjointMasks(f"joint valid mask has {n} pixel(s)")
        xs = d_s.values.ravel()[self.idx]
        xt = d_t.values.ravel()[self.idx]
        self.xs, self.xt = xs, xt
        eps = strategy.epsilon
        self.levels = []
        if strategy.kind == NONE:
            self.n_ctx = np.ones(n)
            self.pixels_used = n
            return
        if strategy.kind == GLOBAL:
            lv = _Level(xs, xt, np.zeros(n, dtype=np.int64), 1, eps)
            if not lv.ok_group[0]:
                raise DegenerateDepth("global normalization: mean absolute deviation below epsilon")
            self.levels.append(lv)
        else:
            lo, hi = float(xt.min()), float(xt.max())
            if hi - lo <= eps:
                raise DegenerateDepth(f"teacher depth range {hi - lo:g} <= {eps:g}")
            for s in strategy.levels:
                self.levels.append(_Level(xs, xt, bin_labels(xt, s, lo, hi), s, eps))
        self.n_ctx = np.sum([lv.used for lv in self.levels], axis=0).astype(np.float64)
        self.pixels_used = int(np.count_nonzero(self.n_ctx))
        if self.pixels_used == 0:
            raise DegenerateDepth("no pixel falls in a usable normalization context")

    # -- distillation loss ---------------------------------------------------

    def dis(self, weights=None, need_grad=False):
        """Mean over used pixels of the per-pixel context-averaged L1 difference."""
        w = np.ones(self.idx.size) if weights is None else np.asarray(weights, dtype=np.float64).ravel()[self.idx]
        m_used = self.pixels_used
        if self.strategy.kind == NONE:
            diff = self.xs - self.xt
            value = float(np.sum(w * np.abs(diff)) / m_used)
            grad = np.sign(diff) * w / m_used if need_grad else None
            return value, self._scatter(grad)
        inv_u = np.where(self.n_ctx > 0, 1.0 / np.maximum(self.n_ctx, 1), 0.0)
        per_pixel = np.zeros(self.idx.size)
        for lv in self.levels:
            per_pixel += np.where(lv.used, np.abs(lv.ns - lv.nt), 0.0)
        value = float(np.sum(w * inv_u * per_pixel) / m_used)
        if not need_grad:
            return value, None
        g = np.zeros(self.idx.size)
        coef = w * inv_u / m_used
        for lv in self.levels:
            g += lv.vjp(coef * np.sign(lv.ns - lv.nt))
        return value, self._scatter(g)

    # -- normalized residual -------------------------------------------------

    def residual(self):
        """Per-pixel context-averaged signed difference and its validity mask."""
        if self.strategy.kind == NONE:
            r = self.xs - self.xt
            used = np.ones(self.idx.size, dtype=bool)
        else:
            acc = np.zeros(self.idx.size)
            for lv in self.levels:
                acc += np.where(lv.used, lv.ns - lv.nt, 0.0)
            used = self.n_ctx > 0
            r = np.where(used, acc / np.maximum(self.n_ctx, 1), 0.0)
        full = np.zeros(self.shape[0] * self.shape[1])
        mask = np.zeros(full.size, dtype=bool)
        full[self.idx] = r
        mask[self.idx] = used
        return full.reshape(self.shape), mask.reshape(self.shape)

    def residual_vjp(self, h):
        """Pull back a cotangent on :meth:`residual` to the raw student map."""
        h = np.asarray(h, dtype=np.float64).ravel()[self.idx]
        if self.strategy.kind == NONE:
            return self._scatter(h)
        coef = np.where(self.n_ctx > 0, h / np.maximum(self.n_ctx, 1), 0.0)
        g = np.zeros(self.idx.size)
        for lv in self.levels:
            g += lv.vjp(coef)
        return self._scatter(g)

    def _scatter(self, g):
        if g is None:
            return None
        full = np.zeros(self.shape[0] * self.shape[1])
        full[self.idx] = g
        return full.reshape(self.shape)


def dis_terms(d_s, d_t, strategy, weights=None, need_grad=False):
    """Distillation loss, pixels used, and (optionally) d loss / d student map."""
    pn = PairNormalizer(d_s, d_t, strategy)
    value, grad = pn.dis(weights, need_grad)
    return value, pn.pixels_used, grad


def loss_dis(d_s, d_t, strategy, weights=None):
    return dis_terms(d_s, d_t, strategy, weights)[0]


# ---------------------------------------------------------------------------
# multi-scale gradient matching
# ---------------------------------------------------------------------------


def _pool_with_adjoint(vals, valid):
    out, out_valid = _kernels.pool2x2_masked(vals, valid)
    h2, w2 = out.shape
    m = valid[: 2 * h2, : 2 * w2].astype(np.float64)
    counts = m.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    return out, out_valid, counts


def _pool_adjoint(g_out, valid, counts, shape):
    h2, w2 = g_out.shape
    share = np.where(counts > 0, g_out / np.maximum(counts, 1), 0.0)
    up = np.repeat(np.repeat(share, 2, axis=0), 2, axis=1)
    g = np.zeros(shape)
    g[: 2 * h2, : 2 * w2] = up
    return np.where(valid, g, 0.0)


def _gradient_level(r, valid, need_grad):
    value = 0.0
    g = np.zeros_like(r) if need_grad else None
    for axis in (1, 0):
        a = np.moveaxis(r, axis, 0)
        v = np.moveaxis(valid, axis, 0)
        d = a[1:] - a[:-1]
        ok = v[1:] & v[:-1]
        n = int(ok.sum())
        if n == 0:
            continue
        value += float(np.abs(d[ok]).sum() / n)
        if need_grad:
            s = np.where(ok, np.sign(d), 0.0) / n
            gm = np.moveaxis(g, axis, 0)
            gm[1:] += s
            gm[:-1] -= s
    return value, g


def residual_gradient_loss(r, valid, scales=4, need_grad=False):
    """Mean over ``scales`` pyramid levels of mean |dR/dx| + mean |dR/dy| (forward differences).

    A level too small to hold any difference pair contributes zero.
    """
    h, w = r.shape
    if scales < 1:
        raise ValueError("scales must be >= 1")
    if h < 2 ** (scales - 1) or w < 2 ** (scales - 1):
        raise TooSmall(f"{h}x{w} residual too small for {scales} scales")
    stack = [(r, valid, None)]
    for _ in range(scales - 1):
        pr, pv, _ = stack[-1]
        out, ov, counts = _pool_with_adjoint(pr, pv)
        stack.append((out, ov, counts))
    total = 0.0
    grads = []
    for vals, v, _ in stack:
        val, g = _gradient_level(vals, v, need_grad)
        total += val
        grads.append(g)
    total /= scales
    if not need_grad:
        return total, None
    # back through the pyramid, coarsest level first
    acc = grads[-1] / scales
    for k in range(scales - 1, 0, -1):
        prev_vals, prev_valid, _ = stack[k - 1]
        acc = _pool_adjoint(acc, prev_valid, stack[k][2], prev_vals.shape) + grads[k - 1] / scales
    return total, acc


def grad_terms(d_s, d_t, strategy, scales=4, need_grad=False, normalizer=None):
    pn = normalizer if normalizer is not None else PairNormalizer(d_s, d_t, strategy)
    r, valid = pn.residual()
    value, g_r = residual_gradient_loss(r, valid, scales, need_grad)
    return value, (pn.residual_vjp(g_r) if need_grad else None)


def loss_grad(d_s, d_t, strategy, scales=4):
    return grad_terms(d_s, d_t, strategy, scales)[0]


# ---------------------------------------------------------------------------
# feature alignment
# ---------------------------------------------------------------------------


def feat_terms(f_s, f_t, need_grad=False, tiny=1e-12):
    """Mean over locations of ``1 - cos(f_s, f_t)``; zero-norm locations are skipped."""
    f_s = np.asarray(f_s, dtype=np.float64)
    f_t = np.asarray(f_t, dtype=np.float64)
    if f_s.shape != f_t.shape:
        raise ShapeMismatch(f"feature shapes differ: {f_s.shape} vs {f_t.shape}")
    ns = np.linalg.norm(f_s, axis=-1)
    nt = np.linalg.norm(f_t, axis=-1)
    ok = (ns > tiny) & (nt > tiny)
    n = int(ok.sum())
    if n == 0:
        return 0.0, (np.zeros_like(f_s) if need_grad else None)
    dot = np.sum(f_s * f_t, axis=-1)
    cos = np.where(ok, dot / np.where(ok, ns * nt, 1.0), 0.0)
    value = float(np.sum(1.0 - cos[ok]) / n)
    if not need_grad:
        return value, None
    ns_ = np.where(ok, ns, 1.0)[..., None]
    nt_ = np.where(ok, nt, 1.0)[..., None]
    g = -(f_t / (ns_ * nt_) - cos[..., None] * f_s / ns_**2) / n
    return value, np.where(ok[..., None], g, 0.0)


def loss_feat(f_s, f_t):
    return feat_terms(f_s, f_t)[0]
