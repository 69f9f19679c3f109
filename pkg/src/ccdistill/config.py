"""Flat JSON experiment configuration with schema validation.

One config file describes one experiment.  Every field has a default, so ``{}``
is a valid config.  Errors carry the file name, the line of the offending key
(when it can be located) and the field name.
"""

import json
import re
from dataclasses import asdict, dataclass, fields, replace

from .cross_context import CropConfig, LossWeights
from .errors import ConfigError
from .normalize import KINDS, NormStrategy
from .synth import AssistantPolicy, SceneConfig, TeacherConfig
from .train import ContextTeacher, TeacherSet, TrainConfig
from .util import config_hash


@dataclass(frozen=True)
class HarnessConfig:
    seed: int = 0
    # training
    iterations: int = 2000
    batch: int = 4
    lr: float = 1e-3
    compute_dtype: str = "float32"
    strategy: str = "hybrid"
    epsilon: float = 1e-6
    lambda1: float = 0.5
    lambda2: float = 1.0
    lambda3: float = 2.0
    grad_scales: int = 4
    shared_context: bool = True
    local_global: bool = True
    # geometry
    image_size: int = 128
    crop_min_side: int = 64
    patch_side: int = 64
    model_input_side: int = 96
    patches_per_side: int = 2
    patch_jitter: int = 0
    # scenes
    scene_min_primitives: int = 2
    scene_max_primitives: int = 6
    scene_near: float = 1.5
    scene_far: float = 8.0
    scene_haze: float = 0.22
    scene_ridge_amplitude: float = 0.06
    scene_albedo_contrast: float = 0.25
    # teachers
    teacher_blur: float = 3.0
    teacher_warp: float = 0.15
    teacher_blur_follows_fov: bool = True
    patch_scale_min: float = 0.5
    patch_scale_max: float = 2.0
    patch_shift: float = 0.5
    assistant_noise: float = 0.02
    assistant_convention: str = "disparity"
    assistant_mode: str = "none"
    primary_prob: float = 0.7
    avg_sigma: float | None = None
    # validation and reporting
    val_scenes: int = 8
    val_every: int = 250
    slack: float = 0.02
    collapse_margin: float = 0.25
    # experiment specific
    fig2_scenes: int = 100
    fig2_min_fraction: float = 0.95
    # "local" is reported but not checked; dropping it saves one run per mode
    table1_strategies: tuple = ("global", "hybrid", "local", "none")
    scaling_sizes: tuple = (100, 300, 1000, 3000)
    scaling_iterations: int = 2000
    gradcheck_size: int = 8
    gradcheck_tolerance: float = 1e-4
    threads: int = 1

    # -- derived objects ------------------------------------------------------

    def norm_strategy(self, kind=None):
        return NormStrategy(kind or self.strategy, self.epsilon)

    def scene_config(self):
        return SceneConfig(
            height=self.image_size,
            width=self.image_size,
            min_primitives=self.scene_min_primitives,
            max_primitives=self.scene_max_primitives,
            near=self.scene_near,
            far=self.scene_far,
            haze=self.scene_haze,
            ridge_amplitude=self.scene_ridge_amplitude,
            albedo_contrast=self.scene_albedo_contrast,
        )

    def crop_config(self):
        return CropConfig(
            crop_min_side=self.crop_min_side,
            patch_side=self.patch_side,
            model_input_side=self.model_input_side,
            patches_per_side=self.patches_per_side,
            jitter=self.patch_jitter,
        )

    def wide_teacher(self):
        return TeacherConfig(
            kind="global",
            blur_radius=self.teacher_blur,
            warp_amplitude=self.teacher_warp,
            blur_follows_fov=self.teacher_blur_follows_fov,
        )

    def patch_teacher(self):
        return TeacherConfig(
            kind="local",
            patch_affine_scale_range=(self.patch_scale_min, self.patch_scale_max),
            patch_affine_shift_range=self.patch_shift,
        )

    def assistant_teacher(self):
        cfg = TeacherConfig(
            kind="assistant",
            patch_affine_scale_range=(self.patch_scale_min, self.patch_scale_max),
            patch_affine_shift_range=self.patch_shift,
            noise_sigma=self.assistant_noise,
            convention=self.assistant_convention,
        )
        return ContextTeacher(cfg, cfg)

    def primary_teacher(self):
        return ContextTeacher(self.wide_teacher(), self.patch_teacher())

    def teacher_set(self):
        assistant = self.assistant_teacher() if self.assistant_mode != "none" else None
        return TeacherSet(self.primary_teacher(), assistant)

    def policy(self, mode=None):
        mode = mode or self.assistant_mode
        if mode == "none":
            return None
        return AssistantPolicy(mode, self.primary_prob, self.avg_sigma)

    def train_config(self, **overrides):
        base = TrainConfig(
            iterations=self.iterations,
            batch=self.batch,
            seed=self.seed,
            strategy=self.norm_strategy(),
            weights=LossWeights(self.lambda1, self.lambda2, self.lambda3),
            shared_context=self.shared_context,
            local_global=self.local_global,
            assistant=self.policy(),
            lr=self.lr,
            crop=self.crop_config(),
            scene=self.scene_config(),
            val_scenes=self.val_scenes,
            val_every=self.val_every,
            grad_scales=self.grad_scales,
            compute_dtype=self.compute_dtype,
        )
        return replace(base, **overrides)

    def to_dict(self):
        d = asdict(self)
        d["scaling_sizes"] = list(self.scaling_sizes)
        d["table1_strategies"] = list(self.table1_strategies)
        return d

    def hash(self):
        return config_hash(self.to_dict())

    def smoke(self):
        """Tiny variant that exercises every code path in seconds."""
        return replace(
            self,
            iterations=1,
            batch=1,
            val_scenes=2,
            val_every=1,
            fig2_scenes=min(self.fig2_scenes, 5),
            scaling_iterations=1,
            scaling_sizes=tuple(range(1, len(self.scaling_sizes) + 1)),
        )


_INT_MIN = {
    "iterations": 1,
    "batch": 1,
    "grad_scales": 1,
    "image_size": 2,
    "crop_min_side": 2,
    "patch_side": 2,
    "model_input_side": 2,
    "patches_per_side": 1,
    "patch_jitter": 0,
    "scene_min_primitives": 0,
    "scene_max_primitives": 0,
    "val_scenes": 0,
    "val_every": 1,
    "fig2_scenes": 1,
    "scaling_iterations": 1,
    "gradcheck_size": 4,
    "threads": 1,
}
_NONNEG_FLOAT = {
    "lambda1", "lambda2", "lambda3", "teacher_blur", "teacher_warp", "patch_shift",
    "assistant_noise", "slack", "collapse_margin", "scene_haze", "scene_ridge_amplitude",
    "scene_albedo_contrast",
}
_POS_FLOAT = {"lr", "epsilon", "patch_scale_min", "patch_scale_max", "scene_near", "scene_far", "gradcheck_tolerance"}
_PROB = {"primary_prob", "fig2_min_fraction"}
_CHOICES = {
    "strategy": KINDS,
    "compute_dtype": ("float32", "float64"),
    "assistant_convention": ("depth", "disparity"),
    "assistant_mode": ("none", "select", "avg"),
}
_FIELD_NAMES = tuple(f.name for f in fields(HarnessConfig))


def _key_line(text, key):
    if text is None:
        return None
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _fail(source, text, key, message):
    line = _key_line(text, key) if key else None
    where = source + (f":{line}" if line else "")
    field_part = f" field '{key}':" if key else ""
    raise ConfigError(f"{where}:{field_part} {message}")


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v):
    return (isinstance(v, (int, float))) and not isinstance(v, bool)


def _check_value(key, v, fail):
    if key in _INT_MIN:
        if not _is_int(v):
            fail(key, f"expected an integer, got {json.dumps(v)}")
        if v < _INT_MIN[key]:
            fail(key, f"must be >= {_INT_MIN[key]}, got {v}")
        return v
    if key == "seed":
        if not _is_int(v) or not 0 <= v < 2**64:
            fail(key, "expected an unsigned 64-bit integer")
        return v
    if key in ("shared_context", "local_global", "teacher_blur_follows_fov"):
        if not isinstance(v, bool):
            fail(key, f"expected true or false, got {json.dumps(v)}")
        return v
    if key in _CHOICES:
        if v not in _CHOICES[key]:
            fail(key, f"expected one of {', '.join(_CHOICES[key])}, got {json.dumps(v)}")
        return v
    if key == "avg_sigma":
        if v is None:
            return None
        if not _is_number(v) or v <= 0:
            fail(key, "expected null or a positive number")
        return float(v)
    if key == "table1_strategies":
        kinds = ("global", "hybrid", "local", "none")
        if not isinstance(v, list) or not all(k in kinds for k in v) or len(set(v)) != len(v):
            fail(key, f"expected a list of distinct strategies from {', '.join(kinds)}")
        for needed in ("global", "hybrid", "none"):
            if needed not in v:
                fail(key, f"must include {needed!r}, which the ordering checks compare")
        return tuple(v)
    if key == "scaling_sizes":
        if not isinstance(v, list) or not v or not all(_is_int(s) and s >= 1 for s in v):
            fail(key, "expected a non-empty list of positive integers")
        if sorted(v) != v or len(set(v)) != len(v):
            fail(key, "sizes must be strictly ascending")
        return tuple(v)
    if not _is_number(v):
        fail(key, f"expected a number, got {json.dumps(v)}")
    v = float(v)
    if key in _NONNEG_FLOAT and v < 0:
        fail(key, f"must be >= 0, got {v}")
    if key in _POS_FLOAT and v <= 0:
        fail(key, f"must be > 0, got {v}")
    if key in _PROB and not 0 <= v <= 1:
        fail(key, f"must lie in [0, 1], got {v}")
    return v


def config_from_dict(data, source="<config>", text=None):
    """Validate a parsed JSON object and build a :class:`HarnessConfig`."""

    def fail(key, message):
        _fail(source, text, key, message)

    if not isinstance(data, dict):
        fail(None, "top level must be a JSON object")
    values = {}
    for key, v in data.items():
        if key not in _FIELD_NAMES:
            fail(key, "unknown field")
        values[key] = _check_value(key, v, fail)
    cfg = HarnessConfig(**values)
    # cross-field rules
    if cfg.patch_scale_min > cfg.patch_scale_max:
        fail("patch_scale_min", "must not exceed patch_scale_max")
    if cfg.scene_near >= cfg.scene_far:
        fail("scene_near", "must be below scene_far")
    if cfg.scene_min_primitives > cfg.scene_max_primitives:
        fail("scene_min_primitives", "must not exceed scene_max_primitives")
    if cfg.patch_side > cfg.crop_min_side:
        fail("patch_side", "must not exceed crop_min_side")
    if cfg.crop_min_side > cfg.image_size:
        fail("crop_min_side", "must not exceed image_size")
    return cfg


def _reject_duplicates(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ConfigError(f"duplicate field '{k}'")
        seen[k] = v
    return seen


def parse_config(text, source="<config>"):
    try:
        data = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return config_from_dict(data, source, text)


def load_config(path):
    """Read and validate a config file; ``None`` gives the defaults."""
    if path is None:
        return HarnessConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror or exc}") from None
    return parse_config(text, str(path))


def dump_config(cfg):
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
