import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ccdistill.cross_context import (
    CropConfig,
    CropPlan,
    LossWeights,
    loss_local_global,
    loss_shared_context,
    loss_total,
    sample_crop_plan,
)
from ccdistill.errors import ImageTooSmall, NonFiniteLoss
from ccdistill.grid import CropRect, DepthGrid, crop, resize_bilinear
from ccdistill.normalize import GLOBAL, HYBRID, KINDS, NONE, LossBreakdown, NormStrategy, loss_dis
from ccdistill.student import MicroStudent
from ccdistill.synth import SceneConfig, generate_scene


def student(seed=0):
    return MicroStudent.he_uniform(3, np.random.default_rng(seed))


def image(seed=0, side=32):
    return generate_scene(seed, SceneConfig(height=side, width=side)).image


def student_teacher(model, transform=lambda d: d):
    """A teacher that runs ``model`` on the resized rect."""

    def teacher(img, rect, side):
        x = resize_bilinear(crop(img, rect), side, side)
        out, _, _ = model.forward(x.values[None])
        return DepthGrid(transform(out[0]))

    return teacher


# -- crop plans ------------------------------------------------------------------------------


def test_plan_full_image_when_forced():
    p = sample_crop_plan(560, 560, 1, CropConfig(crop_min_side=560, patch_side=560, model_input_side=560))
    assert p.global_rect == CropRect(0, 0, 560)


def test_plan_deterministic():
    cfg = CropConfig(64, 32, 48, jitter=3)
    assert sample_crop_plan(128, 100, 9, cfg) == sample_crop_plan(128, 100, 9, cfg)


def test_plan_two_by_two_stride():
    p = sample_crop_plan(1120, 1120, 0, CropConfig(crop_min_side=1120, patch_side=560, model_input_side=560))
    assert p.global_rect.side == 1120
    assert sorted((r.x0, r.y0) for r in p.local_rects) == [(0, 0), (0, 560), (560, 0), (560, 560)]
    assert all(r.side == 560 for r in p.local_rects)


@given(st.integers(0, 2**63 - 1), st.integers(0, 5), st.integers(1, 3))
def test_local_rects_inside_global(seed, jitter, n):
    cfg = CropConfig(crop_min_side=40, patch_side=24, model_input_side=32, patches_per_side=n, jitter=jitter)
    p = sample_crop_plan(64, 80, seed, cfg)
    host = CropRect(0, 0, p.global_rect.side)
    assert len(p.local_rects) == n * n
    assert all(host.contains(r) for r in p.local_rects)
    assert p.global_rect.fits(64, 80)


def test_plan_errors():
    with pytest.raises(ImageTooSmall):
        sample_crop_plan(30, 30, 0, CropConfig(crop_min_side=32, patch_side=16, model_input_side=16))
    with pytest.raises(ValueError):
        CropPlan(CropRect(0, 0, 10), (CropRect(5, 5, 8),), 10)
    with pytest.raises(ValueError):
        CropConfig(crop_min_side=10, patch_side=20)


# -- shared context ------------------------------------------------------------------------------


def test_shared_context_identical_predictors():
    m = student(1)
    plan = sample_crop_plan(32, 32, 3, CropConfig(16, 8, 16))
    for kind in KINDS:
        assert loss_shared_context(m, student_teacher(m), image(1), plan, NormStrategy(kind)).dis == 0.0


def test_shared_context_global_affine_teacher():
    m = student(2)
    plan = sample_crop_plan(32, 32, 4, CropConfig(16, 8, 16))
    t = student_teacher(m, lambda d: 3.0 * d - 2.0)
    assert loss_shared_context(m, t, image(2), plan, NormStrategy(GLOBAL)).dis < 1e-12


def test_shared_context_straight_line_recomputation():
    m, other = student(3), student(4)
    img = image(3)
    plan = sample_crop_plan(32, 32, 5, CropConfig(16, 8, 20))
    got = loss_shared_context(m, student_teacher(other), img, plan, NormStrategy(HYBRID))
    x = resize_bilinear(crop(img, plan.global_rect), 20, 20).values[None]
    d_s = DepthGrid(m.forward(x)[0][0])
    d_t = DepthGrid(other.forward(x)[0][0])
    assert got.dis == pytest.approx(loss_dis(d_s, d_t, NormStrategy(HYBRID)), abs=1e-12)
    w = LossWeights()
    assert got.total == pytest.approx(got.dis + w.lambda2 * got.feat + w.lambda3 * got.grad, abs=1e-12)


# -- local-global ------------------------------------------------------------------------------


def _aligned_plan(n_side=2):
    # global side equals the model input, so student pixels map 1:1 onto image pixels
    rects = tuple(CropRect(x, y, 12) for y in (0, 12) for x in (0, 12))[: n_side * n_side]
    return CropPlan(CropRect(4, 4, 24), rects, 24)


def _crop_of_student_teacher(model, plan, transform=None):
    x = resize_bilinear(crop(image(5), plan.global_rect), plan.model_input_side, plan.model_input_side)
    full = model.forward(x.values[None])[0][0]
    rng = np.random.default_rng(0)

    def teacher(img, rect, side):
        ys, xs = rect.y0 - plan.global_rect.y0, rect.x0 - plan.global_rect.x0
        d = full[ys:ys + rect.side, xs:xs + rect.side]
        assert side == rect.side
        return DepthGrid(transform(d, rng) if transform else d)

    return teacher


@pytest.mark.parametrize("kind", [GLOBAL, NONE])
def test_local_global_self_crop_teacher_is_zero(kind):
    m = student(5)
    plan = _aligned_plan()
    out = loss_local_global(m, _crop_of_student_teacher(m, plan), image(5), plan, NormStrategy(kind))
    assert out.dis <= 1e-10


def test_local_global_single_patch_equals_shared_context():
    m, other = student(6), student(7)
    img = image(6)
    plan = CropPlan(CropRect(2, 3, 24), (CropRect(0, 0, 24),), 24)
    t = student_teacher(other)
    for kind in KINDS:
        lg = loss_local_global(m, t, img, plan, NormStrategy(kind))
        sc = loss_shared_context(m, t, img, plan, NormStrategy(kind))
        assert lg.dis == pytest.approx(sc.dis, abs=1e-12)


def test_local_global_none_fails_under_patch_affines():
    m = student(8)
    plan = _aligned_plan()

    def affine(d, rng):
        return rng.uniform(0.5, 2.0) * d + rng.uniform(-1, 1)

    t = _crop_of_student_teacher(m, plan, affine)
    none = loss_local_global(m, t, image(5), plan, NormStrategy(NONE)).dis
    glob = loss_local_global(m, _crop_of_student_teacher(m, plan, affine), image(5), plan, NormStrategy(GLOBAL)).dis
    assert glob < 1e-10 and none > 0.05


# -- total ------------------------------------------------------------------------------


def test_loss_total_examples():
    zero = LossBreakdown()
    assert loss_total({"sc": zero, "lg": zero}) == 0.0
    sc = LossBreakdown(dis=1.0)
    lg = LossBreakdown(dis=2.0)
    assert loss_total({"sc": sc, "lg": lg}) == 2.0
    sc = LossBreakdown(dis=1.0, feat=0.3, grad=0.7)
    assert loss_total({"sc": sc, "lg": lg}, LossWeights(0.5, 0.0, 0.0)) == 2.0
    with pytest.raises(NonFiniteLoss):
        loss_total({"sc": LossBreakdown(dis=np.inf)})


@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0.01, 1))
def test_loss_total_linear_in_weights(l1, l2, l3, h):
    parts = {"sc": LossBreakdown(dis=0.4, feat=0.2, grad=0.1), "lg": LossBreakdown(dis=0.9, feat=5.0, grad=5.0)}
    base = loss_total(parts, LossWeights(l1, l2, l3))
    assert loss_total(parts, LossWeights(l1 + h, l2, l3)) - base == pytest.approx(0.9 * h, abs=1e-12)
    assert loss_total(parts, LossWeights(l1, l2 + h, l3)) - base == pytest.approx(0.2 * h, abs=1e-12)
    assert loss_total(parts, LossWeights(l1, l2, l3 + h)) - base == pytest.approx(0.1 * h, abs=1e-12)
    # without the shared-context pair the auxiliary terms come from the local-global pairs
    assert loss_total({"lg": parts["lg"]}, LossWeights(1.0, 0.0, 0.0)) == 0.9
    assert loss_total({"lg": parts["lg"]}, LossWeights(0.0, 1.0, 0.0)) == 5.0
