import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ccdistill.errors import OutOfBounds
from ccdistill.grid import CropRect, DepthGrid, crop
from ccdistill.metrics import fit_scale_shift
from ccdistill.synth import (
    ASSISTANT_TEACHER,
    AVG,
    GLOBAL_TEACHER,
    LOCAL_TEACHER,
    SELECT,
    AssistantPolicy,
    SceneConfig,
    TeacherConfig,
    base_depth,
    combine_assistant,
    draw_primary,
    generate_scene,
    load_scene,
    save_scene,
    teacher_features,
    teacher_predict,
)

SMALL = SceneConfig(height=32, width=32)


def test_scene_deterministic():
    a, b = generate_scene(5, SMALL), generate_scene(5, SMALL)
    assert np.array_equal(a.gt_depth.values, b.gt_depth.values)
    assert np.array_equal(a.image.values, b.image.values)
    assert not np.array_equal(a.gt_depth.values, generate_scene(6, SMALL).gt_depth.values)


def test_depth_positive_over_many_seeds():
    cfg = SceneConfig(height=16, width=16)
    assert min(generate_scene(s, cfg).gt_depth.values.min() for s in range(1000)) > 0


def test_zero_ridge_gives_base_field():
    cfg = SceneConfig(height=32, width=32, ridge_amplitude=0.0)
    assert np.array_equal(generate_scene(3, cfg).gt_depth.values, base_depth(3, cfg))


def test_scene_shapes_and_ranges():
    s = generate_scene(0, SceneConfig(height=24, width=40))
    assert s.gt_depth.shape == (24, 40) and s.image.shape == (24, 40, 3)
    assert s.image.values.min() >= 0 and s.image.values.max() <= 1
    with pytest.raises(ValueError):
        SceneConfig(height=4, width=4)


def test_scene_dump_round_trip(tmp_path):
    s = generate_scene(9, SMALL)
    save_scene(s, SMALL, tmp_path, "x")
    back, meta = load_scene(tmp_path, "x")
    assert meta["seed"] == 9 and len(meta["config_hash"]) == 64
    assert np.array_equal(back.gt_depth.values, s.gt_depth.values.astype(np.float32).astype(np.float64))
    assert np.abs(back.image.values - s.image.values).max() <= 0.5 / 255 + 1e-12


# -- teachers ------------------------------------------------------------------------------


def test_zero_error_teachers_are_exact():
    s = generate_scene(1, SMALL)
    r = CropRect(4, 6, 16)
    gt = crop(s.gt_depth, r).values
    assert np.array_equal(teacher_predict(TeacherConfig(GLOBAL_TEACHER), s, r).values, gt)
    assert np.array_equal(teacher_predict(TeacherConfig(LOCAL_TEACHER), s, r, np.random.default_rng(0)).values, gt)


def test_teacher_out_of_bounds():
    with pytest.raises(OutOfBounds):
        teacher_predict(TeacherConfig(), generate_scene(1, SMALL), CropRect(20, 20, 16))


def test_teacher_deterministic_given_call_seed():
    s = generate_scene(2, SMALL)
    cfg = TeacherConfig(LOCAL_TEACHER, patch_affine_scale_range=(0.5, 2.0), patch_affine_shift_range=0.5)
    r = CropRect(0, 0, 16)
    a = teacher_predict(cfg, s, r, np.random.default_rng(7)).values
    b = teacher_predict(cfg, s, r, np.random.default_rng(7)).values
    assert np.array_equal(a, b)


@given(st.integers(0, 2**32 - 1), st.integers(0, 16), st.integers(0, 16), st.integers(2, 16))
def test_local_teacher_error_is_affine(seed, x0, y0, side):
    s = generate_scene(seed % 50, SMALL)
    x0, y0 = min(x0, 32 - side), min(y0, 32 - side)
    r = CropRect(x0, y0, side)
    cfg = TeacherConfig(LOCAL_TEACHER, patch_affine_scale_range=(0.5, 2.0), patch_affine_shift_range=0.5)
    lab = teacher_predict(cfg, s, r, np.random.default_rng(seed))
    gt = crop(s.gt_depth, r)
    if np.ptp(lab.values) < 1e-9:
        return
    corr = np.corrcoef(lab.values.ravel(), gt.values.ravel())[0, 1]
    assert abs(corr - 1.0) < 1e-10


def test_global_teacher_warp_not_globally_affine():
    cfg = TeacherConfig(GLOBAL_TEACHER, warp_amplitude=0.15)
    for seed in range(5):
        s = generate_scene(seed, SceneConfig(height=64, width=64))
        pred = teacher_predict(cfg, s, CropRect(0, 0, 64))
        whole = fit_scale_shift(pred, s.gt_depth).residual
        quads = []
        for y0 in (0, 32):
            for x0 in (0, 32):
                r = CropRect(x0, y0, 32)
                quads.append(fit_scale_shift(crop(pred, r), crop(s.gt_depth, r)).residual)
        assert whole > np.mean(quads)


def test_blur_follows_field_of_view():
    s = generate_scene(4, SceneConfig(height=64, width=64))
    cfg = TeacherConfig(GLOBAL_TEACHER, blur_radius=3.0, blur_follows_fov=True)
    r = CropRect(0, 0, 32)
    small = teacher_predict(cfg, s, r).values
    wide = crop(teacher_predict(cfg, s, CropRect(0, 0, 64)), r).values
    gt = crop(s.gt_depth, r).values
    assert np.abs(small - gt).mean() < np.abs(wide - gt).mean()


def test_assistant_convention_and_noise():
    s = generate_scene(4, SMALL)
    r = CropRect(0, 0, 32)
    cfg = TeacherConfig(ASSISTANT_TEACHER, convention="disparity")
    assert np.allclose(teacher_predict(cfg, s, r, np.random.default_rng(0)).values, 1.0 / s.gt_depth.values)
    noisy = TeacherConfig(ASSISTANT_TEACHER, noise_sigma=0.02)
    out = teacher_predict(noisy, s, r, np.random.default_rng(0)).values
    assert not np.allclose(out, s.gt_depth.values)


def test_teacher_config_validation():
    with pytest.raises(ValueError):
        TeacherConfig(patch_affine_scale_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        TeacherConfig(warp_amplitude=-1)
    with pytest.raises(ValueError):
        TeacherConfig(kind="oracle")


def test_teacher_features_shape_and_ramp():
    lab = np.tile(np.arange(8.0), (8, 1))
    f = teacher_features(lab)
    assert f.shape == (8, 8, 4)
    assert np.all(f[:, :-1, 0] == 1.0) and np.all(f[..., 1] == 0.0)


# -- assistant policies ----------------------------------------------------------------------


def test_avg_identical_labels():
    lab = DepthGrid(np.random.default_rng(0).uniform(1, 3, (6, 6)))
    fused, w = combine_assistant(lab, lab, AssistantPolicy(AVG))
    assert np.allclose(fused.values, lab.values, atol=1e-12) and np.all(w == 1.0)


def test_avg_aligns_and_downweights_disagreement():
    r = np.random.default_rng(1)
    p = DepthGrid(r.uniform(1, 3, (8, 8)))
    a_vals = 2 * p.values + 1
    a_vals[0, 0] += 5.0
    fused, w = combine_assistant(p, DepthGrid(a_vals), AssistantPolicy(AVG))
    # the one conflicting pixel gets the smallest weight by a wide margin
    assert w[0, 0] == w.min() and w[0, 0] < 1e-3 * np.median(w)
    assert abs(fused.values[4, 4] - p.values[4, 4]) < 0.2


def test_select_degenerate_probabilities():
    p, a = DepthGrid(np.ones((2, 2)) + np.eye(2)), DepthGrid(np.zeros((2, 2)) + np.eye(2))
    rng = np.random.default_rng(0)
    for _ in range(50):
        out, w = combine_assistant(p, a, AssistantPolicy(SELECT, primary_prob=1.0), rng)
        assert out is p and np.all(w == 1)
    out, _ = combine_assistant(p, a, AssistantPolicy(SELECT, primary_prob=0.0), rng)
    assert out is a


def test_select_frequency():
    rng = np.random.default_rng(2024)
    pol = AssistantPolicy(SELECT, 0.7)
    n = sum(draw_primary(pol, rng) for _ in range(10_000))
    assert abs(n - 7000) <= 150
    # within 4 standard deviations for a shorter sequence as well
    n = sum(draw_primary(pol, rng) for _ in range(2000))
    assert abs(n / 2000 - 0.7) <= 4 * np.sqrt(0.21 / 2000)


def test_policy_validation():
    with pytest.raises(ValueError):
        AssistantPolicy(primary_prob=1.5)
    with pytest.raises(ValueError):
        AssistantPolicy(mode="vote")
