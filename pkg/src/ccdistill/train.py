"""Distillation training loop for the micro-student."""

import csv
import io as _io
import time
from dataclasses import dataclass, field

import numpy as np

from .cross_context import (
    CropConfig,
    LossWeights,
    full_image_plan,
    local_global_terms,
    pair_terms,
    patch_label_side,
    patch_sampler,
    sample_crop_plan,
)
from .errors import NonFiniteLoss
from .grid import DepthGrid, crop, resize_bilinear
from .metrics import evaluate
from .normalize import NormStrategy
from .student import MicroStudent, OptimState, adam_step
from .synth import (
    SELECT,
    AssistantPolicy,
    SceneConfig,
    TeacherConfig,
    combine_assistant,
    draw_primary,
    generate_scene,
    teacher_label,
)
from .util import child_rng, config_hash, tune_allocator

VAL_SEED_BASE = 1 << 31


@dataclass(frozen=True)
class ContextTeacher:
    """A pseudo-label source whose behaviour depends on how much of the scene it sees.

    ``wide`` answers for the student's global region (or the whole image);
    ``patch`` answers for local patches.
    """

    wide: TeacherConfig
    patch: TeacherConfig

    def label(self, scene, rect, side, role, rng):
        cfg = self.wide if role == "wide" else self.patch
        return teacher_label(cfg, scene, rect, side, rng)


def oracle_teacher():
    exact = TeacherConfig()
    return ContextTeacher(exact, exact)


@dataclass(frozen=True)
class TeacherSet:
    primary: ContextTeacher
    assistant: ContextTeacher | None = None


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch: int = 4
    seed: int = 0
    strategy: NormStrategy = NormStrategy()
    weights: LossWeights = LossWeights()
    shared_context: bool = True
    local_global: bool = True
    assistant: AssistantPolicy | None = None
    lr: float = 1e-3
    crop: CropConfig = CropConfig(crop_min_side=64, patch_side=64, model_input_side=96)
    scene: SceneConfig = SceneConfig()
    corpus_size: int | None = None
    val_scenes: int = 8
    val_every: int = 200
    grad_scales: int = 4
    compute_dtype: str = "float32"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.corpus_size is not None and self.corpus_size < 1:
            raise ValueError("corpus_size must be >= 1")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError("compute_dtype must be float32 or float64")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")

    @property
    def baseline(self):
        """Neither mode flag: full-image shared context with no random cropping."""
        return not (self.shared_context or self.local_global)


@dataclass
class TrainResult:
    model: MicroStudent
    optim: OptimState
    log: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def final_metrics(self):
        return self.validation[-1] if self.validation else None

    def log_csv(self):
        return _rows_to_csv(self.log)

    def validation_csv(self):
        return _rows_to_csv(self.validation)


def _rows_to_csv(rows):
    if not rows:
        return ""
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def corpus_seeds(size):
    """Training corpora are nested: a corpus of size n is the first n seeds of any larger one."""
    return np.arange(size, dtype=np.int64)


def validation_seeds(n):
    return [VAL_SEED_BASE + i for i in range(n)]


def _student_input(image, rect, side):
    return resize_bilinear(crop(image, rect), side, side).values


class _Validator:
    def __init__(self, cfg, generator):
        self.side = cfg.crop.model_input_side
        self.items = []
        for s in validation_seeds(cfg.val_scenes):
            scene = generator(s)
            h, w = scene.gt_depth.shape
            x = resize_bilinear(scene.image, self.side, self.side).values
            self.items.append((x, scene.gt_depth, h, w))

    def __call__(self, model):
        if not self.items:
            return None
        x = np.stack([it[0] for it in self.items])
        out, _, _ = model.forward(x)
        rel, d1 = [], []
        for pred, (_, gt, h, w) in zip(out, self.items):
            up = resize_bilinear(DepthGrid(pred), h, w)
            m = evaluate(up, gt)
            rel.append(m.absrel)
            d1.append(m.delta1)
        return float(np.mean(rel)), float(np.mean(d1))


def _fetch_labels(teachers, policy, use_primary, scene, requests, rngs):
    """Labels (and optional per-pixel weights) for each requested (rect, role, side)."""
    labels, weights = [], []
    for rect, role, side in requests:
        if policy is None or policy.mode == SELECT:
            src, rng = (teachers.primary, rngs["primary"]) if use_primary else (teachers.assistant, rngs["assistant"])
            labels.append(src.label(scene, rect, side, role, rng))
            weights.append(None)
        else:
            p = teachers.primary.label(scene, rect, side, role, rngs["primary"])
            a = teachers.assistant.label(scene, rect, side, role, rngs["assistant"])
            fused, w = combine_assistant(p, a, policy)
            labels.append(fused)
            weights.append(w)
    return labels, weights


@dataclass
class SampleJob:
    """One training sample: crop plan, pseudo-labels and optional label weights."""

    plan: object
    labels: list
    label_weights: list


def prepare_sample(cfg, scene, plan_seed, teachers, policy=None, use_primary=True, rngs=None):
    """Student input ``(M, M, 3)`` and the matching :class:`SampleJob`."""
    side = cfg.crop.model_input_side
    h, w = scene.gt_depth.shape
    if cfg.baseline:
        plan = full_image_plan(h, w, side)
    else:
        plan = sample_crop_plan(h, w, int(plan_seed), cfg.crop)
    requests = []
    if cfg.shared_context or cfg.baseline:
        requests.append((plan.global_rect, "wide", side))
    if cfg.local_global:
        requests.extend((plan.global_rect.offset(r), "patch", patch_label_side(plan, r)) for r in plan.local_rects)
    if rngs is None:
        rngs = {"primary": np.random.default_rng(0), "assistant": np.random.default_rng(1)}
    labels, lws = _fetch_labels(teachers, policy, use_primary, scene, requests, rngs)
    return _student_input(scene.image, plan.global_rect, side), SampleJob(plan, labels, lws)


def sample_objective(cfg, out, feats, job):
    """Composite loss for one sample and its gradients w.r.t. the student outputs.

    ``out`` is the ``(M, M)`` depth map and ``feats`` the ``(M, M, 4)`` features.
    Returns ``(terms, d_out, d_feats)`` where ``terms`` holds ``sc_dis``,
    ``lg_dis``, ``feat``, ``grad``, ``total`` and ``pixels_used``.
    """
    w = cfg.weights
    labels, lws = job.labels, job.label_weights
    sc = lg = None
    k = 0
    if cfg.shared_context or cfg.baseline:
        sc = pair_terms(DepthGrid(out), labels[0], cfg.strategy, feats, lws[0], need_grad=True, grad_scales=cfg.grad_scales)
        k = 1
    if cfg.local_global:
        samplers = [patch_sampler(job.plan, r, lab.shape[0]) for r, lab in zip(job.plan.local_rects, labels[k:])]
        lw = lws[k:] if any(x is not None for x in lws[k:]) else None
        lg = local_global_terms(out, labels[k:], samplers, cfg.strategy, feats, lw, need_grad=True, aux=sc is None)
    # auxiliary terms come from the shared-context pair when there is one
    aux = sc if sc is not None else lg
    terms = {"sc_dis": 0.0, "lg_dis": 0.0, "feat": aux.feat, "grad": aux.grad, "total": 0.0, "pixels_used": 0}
    total = w.lambda2 * aux.feat + w.lambda3 * aux.grad
    d_out = w.lambda3 * aux.d_grad
    if sc is not None:
        total += sc.dis
        d_out = d_out + sc.d_dis
        terms["sc_dis"] = sc.dis
        terms["pixels_used"] += sc.pixels_used
    if lg is not None:
        total += w.lambda1 * lg.dis
        d_out = d_out + w.lambda1 * lg.d_dis
        terms["lg_dis"] = lg.dis
        terms["pixels_used"] += lg.pixels_used
    terms["total"] = total
    d_feats = w.lambda2 * aux.d_feat if aux.d_feat is not None else np.zeros_like(feats)
    return terms, d_out, d_feats


def train(cfg, generator=None, teachers=None, progress=None):
    """Train a micro-student by distillation; deterministic for a fixed config."""
    t0 = time.perf_counter()
    tune_allocator()
    if generator is None:
        scene_cfg = cfg.scene

        def generator(seed):
            return generate_scene(seed, scene_cfg)

    if teachers is None:
        teachers = TeacherSet(oracle_teacher())
    policy = cfg.assistant
    if policy is not None and teachers.assistant is None:
        raise ValueError("an assistant policy needs an assistant teacher")

    model = MicroStudent.he_uniform(3, child_rng(cfg.seed, "init"), dtype=cfg.compute_dtype)
    optim = OptimState.zeros(model.n_params, lr=cfg.lr)
    data_rng = child_rng(cfg.seed, "data")
    rngs = {
        "primary": child_rng(cfg.seed, "teacher-primary"),
        "assistant": child_rng(cfg.seed, "teacher-assistant"),
    }
    policy_rng = child_rng(cfg.seed, "policy")
    corpus = corpus_seeds(cfg.corpus_size) if cfg.corpus_size else None
    validate = _Validator(cfg, generator)
    result = TrainResult(model, optim)

    for it in range(1, cfg.iterations + 1):
        if corpus is not None:
            seeds = corpus[data_rng.integers(0, corpus.size, cfg.batch)]
        else:
            seeds = data_rng.integers(0, VAL_SEED_BASE, cfg.batch)
        plan_seeds = data_rng.integers(0, 2**62, cfg.batch)
        use_primary = True
        if policy is not None and policy.mode == SELECT:
            use_primary = draw_primary(policy, policy_rng)

        inputs, jobs = [], []
        for seed, pseed in zip(seeds, plan_seeds):
            x, job = prepare_sample(cfg, generator(int(seed)), pseed, teachers, policy, use_primary, rngs)
            inputs.append(x)
            jobs.append(job)

        out, feats, cache = model.forward(np.stack(inputs))
        if not np.all(np.isfinite(out)):
            raise NonFiniteLoss(f"non-finite student output at iteration {it}", iteration=it)
        g_out = np.zeros_like(out)
        g_feat = np.zeros_like(feats)
        row = {"iteration": it, "sc_dis": 0.0, "lg_dis": 0.0, "feat": 0.0, "grad": 0.0, "total": 0.0, "pixels_used": 0}
        for b, job in enumerate(jobs):
            terms, d_out, d_feats = sample_objective(cfg, out[b], feats[b], job)
            for key in ("sc_dis", "lg_dis", "feat", "grad", "total"):
                row[key] += terms[key] / cfg.batch
            row["pixels_used"] += terms["pixels_used"]
            g_out[b] = d_out / cfg.batch
            g_feat[b] = d_feats / cfg.batch
        if not np.isfinite(row["total"]):
            result.log.append(row)
            raise NonFiniteLoss(f"non-finite loss at iteration {it}", iteration=it)
        grad = model.backward(cache, g_out, g_feat)
        adam_step(model.params, grad, optim)
        result.log.append(row)
        if it % cfg.val_every == 0 or it == cfg.iterations:
            metrics = validate(model)
            if metrics is not None:
                result.validation.append({"iteration": it, "absrel": metrics[0], "delta1": metrics[1]})
        if progress is not None:
            progress(it, row)

    result.wall_clock = time.perf_counter() - t0
    return result


def validate_model(model, cfg, generator=None):
    if generator is None:
        generator = lambda s: generate_scene(s, cfg.scene)  # noqa: E731
    return _Validator(cfg, generator)(model)


def run_config_hash(cfg, teachers):
    from dataclasses import asdict

    return config_hash({"train": asdict(cfg), "teachers": asdict(teachers)})


__all__ = [
    "ContextTeacher",
    "TeacherSet",
    "TrainConfig",
    "TrainResult",
    "train",
    "prepare_sample",
    "sample_objective",
    "SampleJob",
    "oracle_teacher",
    "validate_model",
    "corpus_seeds",
    "validation_seeds",
    "run_config_hash",
]
