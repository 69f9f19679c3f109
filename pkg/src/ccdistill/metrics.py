"""Least-squares scale/shift alignment and the AbsRel / delta1 metrics."""

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePrediction, DisjointMasks, NoEvaluablePixels
from .grid import DepthGrid

GT_FLOOR = 1e-9
DELTA1_THRESHOLD = 1.25


@dataclass(frozen=True)
class AffineFit:
    scale: float
    shift: float
    residual: float

    def apply(self, pred):
        return pred.with_values(self.scale * pred.values + self.shift)


@dataclass(frozen=True)
class MetricPair:
    absrel: float
    delta1: float
    n_evaluated: int = 0
    n_excluded: int = 0


def fit_scale_shift(pred, gt, var_floor=1e-12):
    """Closed-form least squares for ``scale * pred + shift ~= gt`` over the joint mask."""
    joint = pred.valid & gt.valid
    p = pred.values[joint]
    g = gt.values[joint]
    if p.size < 2:
        raise DisjointMasks(f"joint mask has {p.size} pixel(s)")
    pm, gm = p.mean(), g.mean()
    dp = p - pm
    var = np.mean(dp * dp)
    if var <= var_floor:
        raise DegeneratePrediction(f"prediction variance {var:g} <= {var_floor:g}")
    scale = np.mean(dp * (g - gm)) / var
    shift = gm - scale * pm
    res = scale * p + shift - g
    return AffineFit(float(scale), float(shift), float(np.mean(res * res)))


def _absrel_parts(pred, gt):
    joint = pred.valid & gt.valid
    ok = joint & (np.abs(gt.values) > GT_FLOOR)
    return ok, int(joint.sum() - ok.sum())


def absrel(pred_aligned, gt):
    ok, _ = _absrel_parts(pred_aligned, gt)
    if not ok.any():
        raise NoEvaluablePixels("no pixel with valid prediction and |gt| > 1e-9")
    p, g = pred_aligned.values[ok], gt.values[ok]
    return float(np.mean(np.abs(p - g) / g))


def _delta1_parts(pred, gt):
    joint = pred.valid & gt.valid
    ok = joint & (pred.values > 0) & (gt.values > 0)
    return ok, int(joint.sum() - ok.sum())


def delta1(pred_aligned, gt):
    """Fraction of evaluated pixels with ``max(p/g, g/p) < 1.25`` (strict)."""
    ok, _ = _delta1_parts(pred_aligned, gt)
    if not ok.any():
        raise NoEvaluablePixels("no pixel with positive prediction and ground truth")
    p, g = pred_aligned.values[ok], gt.values[ok]
    return float(np.mean(np.maximum(p / g, g / p) < DELTA1_THRESHOLD))


def evaluate(pred, gt, align=True):
    """Align ``pred`` to ``gt`` (optional) and report both metrics with pixel counts."""
    if align:
        pred = fit_scale_shift(pred, gt).apply(pred)
    ok_a, excl_a = _absrel_parts(pred, gt)
    _, excl_d = _delta1_parts(pred, gt)
    return MetricPair(absrel(pred, gt), delta1(pred, gt), int(ok_a.sum()), max(excl_a, excl_d))


def fig2_experiment(pred, gt):
    """AbsRel on the central crop after aligning on the full image vs on the crop itself.

    Returns ``(global_absrel, local_absrel)``.
    """
    h, w = gt.shape
    if h < 4 or w < 4:
        raise ValueError("fig2 experiment needs at least 4x4 grids")
    y0, x0 = h // 4, w // 4
    ch, cw = h // 2, w // 2

    def centre(g):
        return DepthGrid(g.values[y0:y0 + ch, x0:x0 + cw], g.valid[y0:y0 + ch, x0:x0 + cw])

    aligned_full = fit_scale_shift(pred, gt).apply(pred)
    global_absrel = absrel(centre(aligned_full), centre(gt))
    p_c, g_c = centre(pred), centre(gt)
    local_absrel = absrel(fit_scale_shift(p_c, g_c).apply(p_c), g_c)
    return global_absrel, local_absrel

