"""Synthetic scenes, pseudo-label oracles and assistant-teacher fusion.

Scenes are procedural depth fields (tilted background, occluding slabs,
ellipsoid bumps and a fine ridge relief) rendered to RGB with Lambertian
shading, a smooth albedo texture and aerial perspective (haze), so depth is
recoverable from local appearance and fine relief shows up in the shading.

The teacher oracles stand in for real pretrained networks and expose the error
modes that matter for distillation:

* ``global``: the teacher looked at a wide field of view.  Structure is right but
  detail is blurred and a smooth multiplicative warp biases depth across the
  image; the output frame is consistent between calls.
* ``local``: the teacher looked at a tight crop.  Full detail, but each call
  lands in its own random affine frame.
* ``assistant``: a second source with local-teacher statistics plus pixel noise,
  optionally in disparity (inverse depth) convention.
"""

import json
import os
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io
from .errors import OutOfBounds
from .grid import DepthGrid, ImageGrid, resize_bilinear
from .metrics import fit_scale_shift
from .normalize import median_mad
from .util import child_rng, config_hash

GLOBAL_TEACHER = "global"
LOCAL_TEACHER = "local"
ASSISTANT_TEACHER = "assistant"
TEACHER_KINDS = (GLOBAL_TEACHER, LOCAL_TEACHER, ASSISTANT_TEACHER)

ALBEDO_BASE = np.array([0.78, 0.62, 0.45])
AIRLIGHT = np.array([0.55, 0.70, 0.95])

SELECT = "select"
AVG = "avg"


@dataclass(frozen=True)
class SceneConfig:
    height: int = 128
    width: int = 128
    min_primitives: int = 2
    max_primitives: int = 6
    near: float = 1.5
    far: float = 8.0
    ridge_amplitude: float = 0.06
    ridge_period: float = 5.0
    haze: float = 0.22
    albedo_contrast: float = 0.25
    light: tuple = (-0.45, -0.55, 0.70)

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("scenes must be at least 8x8")
        if not 1 <= self.min_primitives <= self.max_primitives:
            raise ValueError("need 1 <= min_primitives <= max_primitives")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")


@dataclass(frozen=True, eq=False)
class Scene:
    image: ImageGrid
    gt_depth: DepthGrid
    seed: int


def _plane_wave(h, w, theta, period, phase, fn=np.cos):
    """``fn(2 pi (x cos(theta) + y sin(theta)) / period + phase)`` on the pixel grid.

    Evaluated through the angle-sum identity as two outer products.
    """
    a = 2 * np.pi * np.arange(w) * np.cos(theta) / period
    b = 2 * np.pi * np.arange(h) * np.sin(theta) / period + phase
    if fn is np.cos:
        return np.outer(np.cos(b), np.cos(a)) - np.outer(np.sin(b), np.sin(a))
    return np.outer(np.sin(b), np.cos(a)) + np.outer(np.cos(b), np.sin(a))


def _smooth_field(rng, h, w, n_waves=3, min_period=0.6, max_period=2.0):
    """Sum of a few random low-frequency cosines, rescaled to [-1, 1]."""
    s = max(h, w)
    acc = np.zeros((h, w))
    for _ in range(n_waves):
        period = rng.uniform(min_period, max_period) * s
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        acc += _plane_wave(h, w, theta, period, phase)
    m = np.abs(acc).max()
    return acc / m if m > 0 else acc


def base_depth(seed, cfg=SceneConfig()):
    """Smooth part of the scene depth (everything except the ridge relief)."""
    rng = child_rng(seed, "scene-base")
    h, w = cfg.height, cfg.width
    yy = (np.arange(h) / (h - 1))[:, None]
    xx = (np.arange(w) / (w - 1))[None, :]
    span = cfg.far - cfg.near
    # background recedes towards the top of the frame, with a mild sideways tilt
    far_level = rng.uniform(0.75, 1.0) * cfg.far
    d = far_level - rng.uniform(0.25, 0.5) * span * yy + rng.uniform(-0.1, 0.1) * span * (xx - 0.5)
    n_prim = int(rng.integers(cfg.min_primitives, cfg.max_primitives + 1))
    for _ in range(n_prim):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        ry, rx = rng.uniform(0.08, 0.3, size=2)
        level = rng.uniform(cfg.near + 0.1 * span, cfg.near + 0.7 * span)
        if rng.random() < 0.5:
            # fronto-parallel slab with a slight tilt; occludes what is behind it
            inside = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
            tilt = rng.uniform(-0.15, 0.15, size=2) * span
            slab = level + tilt[0] * (yy - cy) + tilt[1] * (xx - cx)
            d = np.where(inside, np.minimum(d, slab), d)
        else:
            r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
            inside = r2 < 1
            bulge = rng.uniform(0.05, 0.2) * span
            bump = level - bulge * np.sqrt(np.clip(1 - r2, 0, None))
            d = np.where(inside, np.minimum(d, bump), d)
    return np.maximum(d, 0.5 * cfg.near)


def ridge_relief(seed, cfg=SceneConfig()):
    rng = child_rng(seed, "scene-ridge")
    h, w = cfg.height, cfg.width
    acc = np.zeros((h, w))
    for _ in range(2):
        theta = rng.uniform(0, np.pi)
        period = cfg.ridge_period * rng.uniform(0.8, 1.25)
        phase = rng.uniform(0, 2 * np.pi)
        acc += _plane_wave(h, w, theta, period, phase, np.sin)
    # ridges live on a random subset of the frame
    patch = _smooth_field(rng, h, w, n_waves=2, min_period=0.4, max_period=0.9) > 0
    return cfg.ridge_amplitude * 0.5 * acc * patch


def _render(depth, seed, cfg):
    """Lambertian shading of a warm textured surface seen through blue haze.

    The haze colour shift is the student's main per-pixel depth cue; shading
    carries the fine relief.
    """
    rng = child_rng(seed, "scene-render")
    h, w = depth.shape
    gy, gx = np.gradient(depth)
    # surface normal of z = depth(x, y), pixel pitch of one unit per 20 px
    k = 20.0
    light = np.asarray(cfg.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    n_dot_l = (light[2] - k * (gx * light[0] + gy * light[1])) / np.sqrt(1.0 + k * k * (gx * gx + gy * gy))
    shade = 0.35 + 0.65 * np.clip(n_dot_l, 0.0, None)
    base = ALBEDO_BASE * rng.uniform(0.9, 1.1)
    texture = 0.5 * cfg.albedo_contrast * _smooth_field(rng, h, w, 3, 0.15, 0.6)
    albedo = base * (1.0 + texture)[..., None] + 0.02 * rng.standard_normal((h, w, 3))
    trans = np.exp(-cfg.haze * depth)[..., None]
    rgb = np.clip(albedo, 0, 1) * shade[..., None] * trans + (1 - trans) * AIRLIGHT
    return np.clip(rgb, 0.0, 1.0)


def generate_scene(seed, cfg=SceneConfig()):
    return _generate_cached(int(seed), cfg)


@lru_cache(maxsize=256)
def _generate_cached(seed, cfg):
    depth = base_depth(seed, cfg) + ridge_relief(seed, cfg)
    depth = np.maximum(depth, 0.5 * cfg.near)
    return Scene(ImageGrid(_render(depth, seed, cfg)), DepthGrid(depth), seed)


# ---------------------------------------------------------------------------
# teachers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TeacherConfig:
    kind: str = GLOBAL_TEACHER
    blur_radius: float = 0.0
    warp_amplitude: float = 0.0
    patch_affine_scale_range: tuple = (1.0, 1.0)
    patch_affine_shift_range: float = 0.0
    noise_sigma: float = 0.0
    # blur radius counts teacher-input pixels, so wider views lose more detail
    blur_follows_fov: bool = False
    # "depth" or "disparity" (inverse depth) output convention
    convention: str = "depth"

    def __post_init__(self):
        if self.kind not in TEACHER_KINDS:
            raise ValueError(f"unknown teacher kind {self.kind!r}")
        lo, hi = self.patch_affine_scale_range
        if not 0 < lo <= hi:
            raise ValueError("patch_affine_scale_range must satisfy 0 < lo <= hi")
        for name in ("blur_radius", "warp_amplitude", "patch_affine_shift_range", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.convention not in ("depth", "disparity"):
            raise ValueError(f"unknown convention {self.convention!r}")


def _convention(depth, cfg):
    return 1.0 / depth if cfg.convention == "disparity" else depth


def global_warp(seed, h, w):
    """Multiplicative warp field in [-1, 1], fixed per scene.

    Mostly radial: error grows from a slightly off-centre point towards the
    frame border, with a weak smooth component on top.
    """
    rng = child_rng(seed, "teacher-warp")
    yy, xx = np.mgrid[0:h, 0:w]
    cy = 0.5 * (h - 1) * (1 + rng.uniform(-0.2, 0.2))
    cx = 0.5 * (w - 1) * (1 + rng.uniform(-0.2, 0.2))
    r2 = ((yy - cy) / (0.5 * h)) ** 2 + ((xx - cx) / (0.5 * w)) ** 2
    field = 2 * r2 / r2.max() - 1 + 0.3 * _smooth_field(rng, h, w, n_waves=2, min_period=1.0, max_period=2.0)
    return field / np.abs(field).max()


def teacher_predict(cfg, scene, rect, rng=None):
    """Pseudo-label for ``rect`` of ``scene`` (same size as the rect)."""
    gt = scene.gt_depth.values
    h, w = gt.shape
    if not rect.fits(h, w):
        raise OutOfBounds(f"{rect} does not fit the {h}x{w} scene")
    ys = slice(rect.y0, rect.y0 + rect.side)
    xs = slice(rect.x0, rect.x0 + rect.side)
    if cfg.kind == GLOBAL_TEACHER:
        sigma = cfg.blur_radius
        if cfg.blur_follows_fov:
            sigma *= rect.side / min(h, w)
        field = gaussian_filter(gt, sigma, mode="reflect") if sigma > 0 else gt
        if cfg.warp_amplitude > 0:
            field = field * (1.0 + cfg.warp_amplitude * global_warp(scene.seed, h, w))
        return DepthGrid(_convention(field[ys, xs], cfg))
    if rng is None:
        rng = np.random.default_rng(0)
    d = _convention(gt[ys, xs], cfg)
    span = float(d.max() - d.min())
    lo, hi = cfg.patch_affine_scale_range
    scale = rng.uniform(lo, hi)
    shift = rng.uniform(-cfg.patch_affine_shift_range, cfg.patch_affine_shift_range) * span
    out = scale * d + shift
    if cfg.kind == ASSISTANT_TEACHER and cfg.noise_sigma > 0:
        out = out + cfg.noise_sigma * span * rng.standard_normal(d.shape)
    return DepthGrid(out)


def teacher_label(cfg, scene, rect, side, rng=None):
    """Teacher output for ``rect`` at the teacher's working resolution ``side``."""
    return resize_bilinear(teacher_predict(cfg, scene, rect, rng), side, side)


def teacher_features(label):
    """Four channels: (d/dx, d/dy) of the label at full and half resolution.

    Forward differences, zero on the last row/column; the half-resolution pair
    is upsampled back (corner aligned).
    """
    label = np.asarray(label, dtype=np.float64)
    h, w = label.shape

    def diffs(a):
        gx = np.zeros_like(a)
        gy = np.zeros_like(a)
        gx[:, :-1] = a[:, 1:] - a[:, :-1]
        gy[:-1, :] = a[1:, :] - a[:-1, :]
        return gx, gy

    gx0, gy0 = diffs(label)
    h2, w2 = h // 2, w // 2
    half = label[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))
    gx1, gy1 = diffs(half)
    up = [resize_bilinear(DepthGrid(g), h, w).values for g in (gx1, gy1)]
    return np.stack([gx0, gy0, up[0], up[1]], axis=-1)


# ---------------------------------------------------------------------------
# assistant-guided supervision
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssistantPolicy:
    mode: str = SELECT
    primary_prob: float = 0.7
    agreement_sigma: float | None = None

    def __post_init__(self):
        if self.mode not in (SELECT, AVG):
            raise ValueError(f"unknown assistant mode {self.mode!r}")
        if not 0.0 <= self.primary_prob <= 1.0:
            raise ValueError("primary_prob must be in [0, 1]")
        if self.agreement_sigma is not None and not self.agreement_sigma > 0:
            raise ValueError("agreement_sigma must be positive")


def draw_primary(policy, rng):
    """One Select-mode draw: True means supervise from the primary teacher."""
    return bool(rng.random() < policy.primary_prob)


def combine_assistant(primary_label, assistant_label, policy, rng=None):
    """Fuse two pseudo-labels; returns ``(label, per-pixel weight grid)``."""
    if primary_label.shape != assistant_label.shape:
        raise ValueError("labels must share dims")
    ones = np.ones(primary_label.shape)
    if policy.mode == SELECT:
        if rng is None:
            rng = np.random.default_rng(0)
        return (primary_label if draw_primary(policy, rng) else assistant_label), ones
    aligned = fit_scale_shift(assistant_label, primary_label).apply(assistant_label)
    joint = primary_label.valid & aligned.valid
    fused = 0.5 * (primary_label.values + aligned.values)
    delta = np.where(joint, primary_label.values - aligned.values, 0.0)
    sigma = policy.agreement_sigma
    if sigma is None:
        sigma = median_mad(delta[joint])[1]
    if sigma <= 1e-12:
        weights = ones
    else:
        weights = np.exp(-(delta**2) / (2 * sigma**2))
    return DepthGrid(np.where(joint, fused, 0.0), joint), np.where(joint, weights, 0.0)


# ---------------------------------------------------------------------------
# corpus dump / load
# ---------------------------------------------------------------------------


def save_scene(scene, cfg, directory, stem=None):
    os.makedirs(directory, exist_ok=True)
    stem = stem or f"scene_{scene.seed:08d}"
    base = os.path.join(directory, stem)
    io.write_pfm(base + ".pfm", scene.gt_depth)
    io.write_ppm(base + ".ppm", scene.image)
    meta = {"seed": int(scene.seed), "config": asdict(cfg), "config_hash": config_hash(asdict(cfg))}
    with open(base + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return base


def load_scene(directory, stem):
    base = os.path.join(directory, stem)
    with open(base + ".json") as f:
        meta = json.load(f)
    depth = io.read_pfm(base + ".pfm")
    image = io.read_ppm(base + ".ppm")
    return Scene(image, depth, int(meta["seed"])), meta


def scene_config_from_dict(d):
    d = dict(d)
    if "light" in d:
        d["light"] = tuple(d["light"])
    return SceneConfig(**d)


