"""Command-line entry point: ``ccdistill <command> [options]``.

Exit codes: 0 success (all checks pass), 1 a check failed, 2 usage or config error.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import experiments as ex
from .config import dump_config, load_config
from .errors import CCDistillError, ConfigError, FormatError
from .grid import DepthGrid, resize_bilinear
from .io import write_pfm
from .metrics import evaluate
from .render import DEFAULT_PALETTE, PALETTES, render_pfm
from .student import load_checkpoint, save_checkpoint
from .synth import generate_scene, save_scene
from .train import train, validation_seeds

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", metavar="PATH", help="flat JSON config; defaults are used when omitted")
    p.add_argument("--seed", type=_u64, help="override the config seed")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    p.add_argument("--threads", type=_positive, help="parallel training runs (default: config value)")
    p.add_argument("--smoke", action="store_true", help="tiny sizes; orderings are not evaluated")


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    parser = _Parser(prog="ccdistill", description="Cross-context depth distillation harness.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    helps = {
        "fig2": "global vs local least-squares alignment of a warped teacher",
        "ablate-norm": "normalization strategies in both distillation modes",
        "ablate-context": "baseline vs shared-context vs local-global vs both",
        "ablate-assistant": "primary, assistant, averaging and selection",
        "scaling": "global vs hybrid normalization across corpus sizes",
        "gradcheck": "analytic vs finite-difference gradients",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text, description=text))
    p = sub.add_parser("train", help="train one student and write a checkpoint", description="Train one student.")
    _common(p)
    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes", description="Evaluate a checkpoint.")
    _common(p)
    p.add_argument("checkpoint", help="checkpoint written by 'train'")
    p = sub.add_parser("render", help="depth PFM to PPM heatmap", description="Render a depth PFM as a heatmap.")
    p.add_argument("input", help="depth map (PFM)")
    p.add_argument("output", help="heatmap (PPM)")
    p.add_argument("--palette", choices=sorted(PALETTES), default=DEFAULT_PALETTE)
    return parser


def _resolve(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    if args.smoke:
        cfg = cfg.smoke()
    return cfg


def _emit(report, out_dir):
    path = ex.write_report(report, out_dir)
    for c in report.checks:
        print(f"[{c.status}] {c.name}" + (f": {c.detail}" if c.detail else ""))
    print(f"report: {path}")
    return EXIT_OK if report.passed else EXIT_FAIL


def _cmd_experiment(args):
    cfg = _resolve(args)
    fn = ex.EXPERIMENTS[args.command]
    report = fn(cfg, smoke=args.smoke)
    return _emit(report, args.out)


def _cmd_train(args):
    cfg = _resolve(args)
    tc = cfg.train_config()
    result = train(tc, teachers=cfg.teacher_set())
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "student.ckpt"), result.model, result.optim, cfg.hash())
    with open(os.path.join(args.out, "train_log.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(result.log_csv())
    with open(os.path.join(args.out, "validation.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(result.validation_csv())
    with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    final = result.final_metrics
    summary = {"config_hash": cfg.hash(), "seed": cfg.seed, "iterations": tc.iterations, "final": final}
    with open(os.path.join(args.out, "train.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out, "train.timing.json"), "w", encoding="utf-8") as fh:
        json.dump({"wall_clock_seconds": round(result.wall_clock, 3)}, fh)
        fh.write("\n")
    if final:
        print(f"final validation: absrel={final['absrel']:.6f} delta1={final['delta1']:.6f}")
    print(f"checkpoint: {os.path.join(args.out, 'student.ckpt')}")
    return EXIT_OK


def _cmd_eval(args):
    t0 = time.perf_counter()
    cfg = _resolve(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    scene_cfg = cfg.scene_config()
    side = cfg.model_input_side
    n = max(cfg.val_scenes, 1)
    rows = []
    scene_dir = os.path.join(args.out, "scenes")
    os.makedirs(scene_dir, exist_ok=True)
    for seed in validation_seeds(n):
        scene = generate_scene(seed, scene_cfg)
        h, w = scene.gt_depth.shape
        x = resize_bilinear(scene.image, side, side)
        out, _, _ = model.forward(x.values[None])
        pred = resize_bilinear(DepthGrid(out[0]), h, w)
        m = evaluate(pred, scene.gt_depth)
        rows.append({"run_id": f"scene-{seed}", "absrel": float(m.absrel), "delta1": float(m.delta1)})
        save_scene(scene, scene_cfg, scene_dir, f"scene_{seed}")
        write_pfm(os.path.join(scene_dir, f"scene_{seed}_pred.pfm"), pred)
    rows.append(
        {
            "run_id": "mean",
            "absrel": float(np.mean([r["absrel"] for r in rows])),
            "delta1": float(np.mean([r["delta1"] for r in rows])),
        }
    )
    report = ex.ExperimentReport("eval", cfg.hash(), cfg.seed, rows, [], columns=("run_id", "absrel", "delta1"))
    report.extra["checkpoint_config_hash"] = ckpt.config_hash
    report.wall_clock = time.perf_counter() - t0
    return _emit(report, args.out)


def _cmd_render(args):
    render_pfm(args.input, args.output, args.palette)
    print(f"wrote {args.output}")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"train": _cmd_train, "eval": _cmd_eval, "render": _cmd_render}
    handler = handlers.get(args.command, _cmd_experiment)
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"ccdistill: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"ccdistill: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CCDistillError as exc:
        iteration = getattr(exc, "iteration", None)
        suffix = f" (iteration {iteration})" if iteration is not None else ""
        print(f"ccdistill: {type(exc).__name__}: {exc}{suffix}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
