"""Crop geometry and the composite cross-context distillation objective.

Shared-context: teacher and student see the same (resized) global region.
Local-global: the student sees the global region once; the teacher sees
overlapping local patches, and each patch label supervises the matching window
of the student's global prediction.  That window is found by mapping teacher
pixel centres exactly (rational coordinates) into the student grid and sampling
bilinearly, so the mapping is linear in the student map and has an exact adjoint.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ImageTooSmall, NonFiniteLoss
from .grid import CropRect, DepthGrid, apply_separable, apply_separable_adjoint, bilinear_matrix, corner_coords, crop, resize_bilinear
from .normalize import LossBreakdown, PairNormalizer, feat_terms, residual_gradient_loss
from .synth import teacher_features
from .util import child_rng


@dataclass(frozen=True)
class CropConfig:
    # full-scale defaults; desk configs shrink them
    crop_min_side: int = 644
    patch_side: int = 560
    model_input_side: int = 560
    patches_per_side: int = 2
    jitter: int = 0

    def __post_init__(self):
        if min(self.crop_min_side, self.patch_side, self.model_input_side, self.patches_per_side) < 1:
            raise ValueError("crop geometry values must be positive")
        if self.patch_side > self.crop_min_side:
            raise ValueError("patch_side cannot exceed crop_min_side")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


@dataclass(frozen=True)
class CropPlan:
    global_rect: CropRect
    local_rects: tuple = ()
    model_input_side: int = 560

    def __post_init__(self):
        g = CropRect(0, 0, self.global_rect.side)
        for r in self.local_rects:
            if not g.contains(r):
                raise ValueError(f"local rect {r} is outside the global region of side {g.side}")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 1.0
    lambda3: float = 2.0

    def __post_init__(self):
        for v in (self.lambda1, self.lambda2, self.lambda3):
            if not (np.isfinite(v) and v >= 0):
                raise ValueError("loss weights must be finite and >= 0")


def patch_offsets(global_side, patch_side, n):
    if n == 1:
        return [0]
    span = global_side - patch_side
    return [(j * span) // (n - 1) for j in range(n)]


def sample_crop_plan(img_h, img_w, rng_seed, cfg):
    """Random square global region plus an ``n x n`` grid of equally overlapping patches."""
    short = min(img_h, img_w)
    if short < cfg.crop_min_side:
        raise ImageTooSmall(f"shortest side {short} < crop_min_side {cfg.crop_min_side}")
    rng = child_rng(rng_seed, "crop-plan")
    side = int(rng.integers(cfg.crop_min_side, short + 1))
    x0 = int(rng.integers(0, img_w - side + 1))
    y0 = int(rng.integers(0, img_h - side + 1))
    offs = patch_offsets(side, cfg.patch_side, cfg.patches_per_side)
    rects = []
    for oy in offs:
        for ox in offs:
            if cfg.jitter:
                ox = int(np.clip(ox + rng.integers(-cfg.jitter, cfg.jitter + 1), 0, side - cfg.patch_side))
                oy_j = int(np.clip(oy + rng.integers(-cfg.jitter, cfg.jitter + 1), 0, side - cfg.patch_side))
            else:
                oy_j = oy
            rects.append(CropRect(ox, oy_j, cfg.patch_side))
    return CropPlan(CropRect(x0, y0, side), tuple(rects), cfg.model_input_side)


def full_image_plan(img_h, img_w, model_input_side):
    """No random cropping: the largest centred square, no local patches."""
    side = min(img_h, img_w)
    return CropPlan(CropRect((img_w - side) // 2, (img_h - side) // 2, side), (), model_input_side)


def patch_label_side(plan, rect):
    """Label resolution for a local patch: the student's pixel density over that patch.

    Finer labels would only be compared against an interpolated student window.
    """
    g = plan.global_rect.side
    m = plan.model_input_side
    return int(max(2, min(m, round(rect.side * m / g))))


def patch_sampler(plan, rect, label_side):
    """Matrices ``(Ry, Rx)`` so that ``Ry @ d_s_global @ Rx.T`` is the student's view of ``rect``
    at the teacher label resolution."""
    g = plan.global_rect.side
    m = plan.model_input_side
    to_student = (m - 1) / (g - 1) if g > 1 else 0.0
    in_patch = corner_coords(label_side, rect.side)
    ry = bilinear_matrix((rect.y0 + in_patch) * to_student, m)
    rx = bilinear_matrix((rect.x0 + in_patch) * to_student, m)
    return ry, rx


# ---------------------------------------------------------------------------
# per-pair terms (array level, with gradients)
# ---------------------------------------------------------------------------


@dataclass
class PairTerms:
    dis: float
    feat: float
    grad: float
    pixels_used: int
    d_dis: np.ndarray | None = None
    d_grad: np.ndarray | None = None
    d_feat: np.ndarray | None = None


def pair_terms(d_s, d_t, strategy, f_s=None, label_weights=None, need_grad=False, grad_scales=4, aux=True):
    """Distillation, gradient-matching and feature terms for one prediction/label pair.

    ``d_s`` is a :class:`DepthGrid` (student), ``d_t`` the label, ``f_s`` the
    student's projected features (``(H, W, 4)``) or None to skip the feature term.
    """
    pn = PairNormalizer(d_s, d_t, strategy)
    dis, d_dis = pn.dis(label_weights, need_grad)
    grad_v, feat_v, d_grad, d_feat = 0.0, 0.0, None, None
    if aux:
        scales = min(grad_scales, _max_scales(d_s.shape))
        r, valid = pn.residual()
        grad_v, g_r = residual_gradient_loss(r, valid, scales, need_grad)
        if need_grad:
            d_grad = pn.residual_vjp(g_r)
        if f_s is not None:
            f_t = teacher_features(np.where(d_t.valid, d_t.values, 0.0))
            feat_v, d_feat = feat_terms(f_s, f_t, need_grad)
    return PairTerms(dis, feat_v, grad_v, pn.pixels_used, d_dis, d_grad, d_feat)


def _max_scales(shape):
    return max(1, int(np.floor(np.log2(min(shape)))) + 1)


def _sample(ry, rx, a):
    return apply_separable(ry, rx, a)


def _sample_adjoint(ry, rx, g):
    return apply_separable_adjoint(ry, rx, g)


def local_global_terms(d_s_global, labels, samplers, strategy, f_s=None, label_weights=None, need_grad=False, aux=True):
    """Mean over patches of :func:`pair_terms` on the student window vs each patch label.

    Returns ``(PairTerms with averaged values, d/d d_s_global parts, d/d f_s)`` where the
    gradient arrays are already pulled back to the student's global grid.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("local-global loss needs at least one patch")
    acc = PairTerms(0.0, 0.0, 0.0, 0)
    shape = d_s_global.shape
    g_dis = np.zeros(shape) if need_grad else None
    g_grad = np.zeros(shape) if need_grad else None
    g_feat = np.zeros(f_s.shape) if (need_grad and f_s is not None) else None
    for k, (label, (ry, rx)) in enumerate(zip(labels, samplers)):
        window = DepthGrid(_sample(ry, rx, d_s_global))
        fw = _sample(ry, rx, f_s) if f_s is not None else None
        lw = None if label_weights is None else label_weights[k]
        t = pair_terms(window, label, strategy, fw, lw, need_grad, aux=aux)
        acc.dis += t.dis / n
        acc.feat += t.feat / n
        acc.grad += t.grad / n
        acc.pixels_used += t.pixels_used
        if need_grad:
            g_dis += _sample_adjoint(ry, rx, t.d_dis) / n
            if t.d_grad is not None:
                g_grad += _sample_adjoint(ry, rx, t.d_grad) / n
            if g_feat is not None and t.d_feat is not None:
                g_feat += _sample_adjoint(ry, rx, t.d_feat) / n
    acc.d_dis, acc.d_grad, acc.d_feat = g_dis, g_grad, g_feat
    return acc


# ---------------------------------------------------------------------------
# model-level API
# ---------------------------------------------------------------------------


def _run_student(student, image):
    if hasattr(student, "forward") and hasattr(student, "params"):
        out, feats, _ = student.forward(image.values[None])
        return DepthGrid(out[0]), feats[0]
    res = student(image)
    if isinstance(res, tuple):
        return res[0], res[1]
    return res, None


def _global_input(image, plan):
    return resize_bilinear(crop(image, plan.global_rect), plan.model_input_side, plan.model_input_side)


def _breakdown(t, weights):
    return LossBreakdown(t.dis, t.feat, t.grad, t.dis + weights.lambda2 * t.feat + weights.lambda3 * t.grad, t.pixels_used)


def loss_shared_context(student, teacher, image, plan, strategy, weights=LossWeights()):
    """Teacher and student both predict on the resized global region.

    ``student(image) -> DepthGrid | (DepthGrid, features)`` (a :class:`MicroStudent`
    works too); ``teacher(image, rect, side) -> DepthGrid`` with ``rect`` in image
    coordinates.
    """
    m = plan.model_input_side
    d_s, f_s = _run_student(student, _global_input(image, plan))
    d_t = teacher(image, plan.global_rect, m)
    return _breakdown(pair_terms(d_s, d_t, strategy, f_s), weights)


def loss_local_global(student, teacher, image, plan, strategy, weights=LossWeights()):
    if not plan.local_rects:
        raise ValueError("plan has no local patches")
    d_s, f_s = _run_student(student, _global_input(image, plan))
    labels, samplers = [], []
    for r in plan.local_rects:
        side = patch_label_side(plan, r)
        labels.append(teacher(image, plan.global_rect.offset(r), side))
        samplers.append(patch_sampler(plan, r, side))
    t = local_global_terms(d_s.values, labels, samplers, strategy, f_s)
    return _breakdown(t, weights)


def loss_total(parts, w=LossWeights()):
    """``sc.dis + lambda1 * lg.dis + lambda2 * feat + lambda3 * grad``.

    Auxiliary terms come from the shared-context pair when it is present,
    otherwise from the local-global pairs.
    """
    sc = parts.get("sc")
    lg = parts.get("lg")
    aux = sc if sc is not None else lg
    total = 0.0
    if sc is not None:
        total += sc.dis
    if lg is not None:
        total += w.lambda1 * lg.dis
    if aux is not None:
        total += w.lambda2 * aux.feat + w.lambda3 * aux.grad
    if not np.isfinite(total):
        raise NonFiniteLoss(f"total loss is not finite ({total})")
    return float(total)
