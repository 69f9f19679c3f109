"""Straight-line reference implementations used as test oracles.

Nothing here imports the package: every statistic is recomputed with plain
Python loops over lists so that shared helpers cannot hide a bug.
"""

import math


def median(xs):
    s = sorted(xs)
    n = len(s)
    if n % 2:
        return s[n // 2]
    return 0.5 * (s[n // 2 - 1] + s[n // 2])


def mad(xs, med):
    return sum(abs(x - med) for x in xs) / len(xs)


def bin_of(v, lo, hi, n_bins):
    """Lower-bin rule: the number of inner edges strictly below ``v``."""
    k = 0
    for j in range(1, n_bins):
        edge = lo + (hi - lo) * j / n_bins
        if v > edge:
            k += 1
    return k


def joint_pixels(s_vals, s_valid, t_vals, t_valid):
    out = []
    for i in range(len(s_vals)):
        if s_valid[i] and t_valid[i]:
            out.append((i, s_vals[i], t_vals[i]))
    return out


def loss_dis(s_vals, s_valid, t_vals, t_valid, kind, eps=1e-6):
    """Distillation loss of flat student/teacher lists under ``kind``.

    Returns ``None`` when the loss is undefined (degenerate statistics).
    """
    pix = joint_pixels(s_vals, s_valid, t_vals, t_valid)
    if len(pix) < 2:
        return None
    if kind == "none":
        return sum(abs(s - t) for _, s, t in pix) / len(pix)
    if kind == "global":
        levels = [1]
    elif kind == "hybrid":
        levels = [1, 2, 4]
    else:
        levels = [4]
    tv = [t for _, _, t in pix]
    lo, hi = min(tv), max(tv)
    if kind != "global" and hi - lo <= eps:
        return None
    per_pixel = [[] for _ in pix]
    for n_bins in levels:
        groups = {}
        for k, (_, s, t) in enumerate(pix):
            b = 0 if n_bins == 1 else bin_of(t, lo, hi, n_bins)
            groups.setdefault(b, []).append(k)
        for members in groups.values():
            ss = [pix[k][1] for k in members]
            ts = [pix[k][2] for k in members]
            if len(members) < 2:
                continue
            ms, mt = median(ss), median(ts)
            a_s, a_t = mad(ss, ms), mad(ts, mt)
            if a_s <= eps or a_t <= eps:
                if kind == "global":
                    return None
                continue
            for k in members:
                ns = (pix[k][1] - ms) / a_s
                nt = (pix[k][2] - mt) / a_t
                per_pixel[k].append(abs(ns - nt))
    used = [sum(v) / len(v) for v in per_pixel if v]
    if not used:
        return None
    return sum(used) / len(used)


def absrel(pred, gt):
    terms = [abs(p - g) / g for p, g in zip(pred, gt) if abs(g) > 1e-9]
    return sum(terms) / len(terms)


def fit(pred, gt):
    n = len(pred)
    pm = sum(pred) / n
    gm = sum(gt) / n
    var = sum((p - pm) ** 2 for p in pred) / n
    cov = sum((p - pm) * (g - gm) for p, g in zip(pred, gt)) / n
    scale = cov / var
    return scale, gm - scale * pm


def isclose(a, b, tol):
    return a is not None and b is not None and math.isfinite(a) and abs(a - b) <= tol
