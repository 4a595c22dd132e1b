"""``coatsim`` command line: dataset generation, coating, baselines, evaluation and the toy model.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io as cio
from .baselines import DEFAULT_BLEND_IF_THRESHOLDS, check_thresholds
from .core import CoatingSpec, InvalidThresholdError, Rng, TraitVector
from .render import SceneSpec, render_coated, render_uncoated, set_default_threads, test_scene

log = logging.getLogger("coatsim")


class UsageError(Exception):
    pass


def _unit_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside [0, 1]")
    return v


def _floats(n):
    def parse(text):
        try:
            vals = tuple(float(x) for x in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated list of numbers") from None
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated values, got {len(vals)}")
        return vals
    return parse


def _read_json(path, what):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from None


def _need_file(path, flag):
    if not Path(path).is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return path


def _write_image(path, img):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".f32":
        cio.save_channel(path, img)
    else:
        cio.save_preview(path, img)


# ---------------------------------------------------------------- subcommands


def cmd_gen(args):
    from .dataset import ConfigError, DatasetConfig, generate_to_disk

    raw = _read_json(args.config, "config") if args.config else {}
    for key in ("groups", "variants", "resolution"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    try:
        config = DatasetConfig.from_dict(raw)
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"invalid dataset config: {exc}") from None
    start = time.perf_counter()
    path = generate_to_disk(config, args.out, args.seed, threads=args.threads)
    print(f"generated {config.groups} groups x {config.variants} variants -> {path} "
          f"in {time.perf_counter() - start:.1f}s")
    return 0


def _load_scene(arg):
    if arg == "builtin:test":
        return test_scene()
    try:
        return SceneSpec.from_dict(_read_json(arg, "scene"))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid scene file {arg}: {exc}") from None


def cmd_coat(args):
    from .plotting import plot_channel_stack

    scene = _load_scene(args.scene)
    h, w = scene.shape
    plain = render_uncoated(scene)
    if args.mask:
        mask = cio.load_mask_any(_need_file(args.mask, "--mask"))
        if mask.shape != (h, w):
            raise UsageError(f"--mask is {mask.shape[1]}x{mask.shape[0]}, scene renders {w}x{h}")
        mask = mask * (plain.object_mask > 0)
    elif args.coverage < 1.0:
        from .render import generate_mask
        mask = generate_mask(plain, Rng(args.seed), args.coverage)
    else:
        mask = plain.object_mask.copy()
    traits = TraitVector(args.roughness, args.metalness, args.transmission, args.thickness)
    if args.albedo:
        albedo = np.clip(cio.load_image_any(_need_file(args.albedo, "--albedo")), 0.0, 1.0)
    else:
        albedo = args.color
    coat = CoatingSpec(traits, albedo, mask)
    stack = render_coated(scene, coat)
    out = Path(args.out)
    _write_image(out, stack.image)
    chan_dir = out.with_name(out.stem + "_channels")
    stack.save(chan_dir, preview=False)
    cio.save_channel(chan_dir / "mask.f32", mask, "mask")
    plot_channel_stack(stack, out.with_name(out.stem + "_channels.png"))
    print(f"wrote {out} and channels in {chan_dir}")
    return 0


def cmd_baseline(args):
    from .baselines import METHODS

    base = cio.load_image_any(_need_file(args.base, "--base"))
    coat = cio.load_image_any(_need_file(args.coat, "--coat"))
    mask = cio.load_mask_any(_need_file(args.mask, "--mask"))
    if coat.shape != base.shape or mask.shape != base.shape[:2]:
        raise UsageError("--base, --coat and --mask must have the same dimensions")
    if args.method == "blend_if":
        try:
            check_thresholds(args.blend_if_thresholds)
        except InvalidThresholdError as exc:
            raise UsageError(f"--blend-if-thresholds: {exc}") from None
        out = METHODS["blend_if"](base, coat, mask, args.blend_if_thresholds)
    else:
        out = METHODS[args.method](base, coat, mask)
    _write_image(args.out, out)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args):
    from .dataset import read_manifest
    from .evaluate import METHOD_NAMES, aggregate_report, run_benchmark
    from .plotting import plot_report
    from .toyflow import load_checkpoint

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise UsageError(f"--methods is empty; choose from {', '.join(METHOD_NAMES)}")
    unknown = [m for m in methods if m not in METHOD_NAMES]
    if unknown:
        raise UsageError(f"unknown methods {unknown}; choose from {', '.join(METHOD_NAMES)}")
    manifest = read_manifest(_need_file(args.manifest, "--manifest"))
    model = None
    if "toy" in methods:
        if not args.checkpoint:
            raise UsageError("the toy method needs --checkpoint")
        model, _ = load_checkpoint(_need_file(args.checkpoint, "--checkpoint"))
    results = run_benchmark(manifest, methods, model, args.blend_if_thresholds, args.sample_steps, args.seed)
    report = aggregate_report(results)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv(), encoding="utf-8")
    out.with_suffix(".txt").write_text(report.to_text(), encoding="utf-8")
    plot_report(report, out.with_suffix(".png"))
    print(report.to_text(), end="")
    return 0


def _train_config(args):
    from .toyflow import TOY_TRAIN_CONFIG, TrainConfig

    raw = dict(TOY_TRAIN_CONFIG) if args.preset == "toy" else {}
    if args.config:
        raw.update(_read_json(args.config, "config"))
    if args.steps is not None:
        raw["total_steps"] = args.steps
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from None


def _load_groups(manifest_path):
    from .dataset import load_group, read_manifest

    manifest = read_manifest(_need_file(manifest_path, "--manifest"))
    return manifest, [load_group(manifest, rec) for rec in manifest.groups]


def cmd_train(args):
    from .plotting import plot_loss_curve
    from .toyflow import FlowModel, save_checkpoint, smoothed, train, training_stream

    config = _train_config(args)
    _, groups = _load_groups(args.manifest)
    side = groups[0].original.image.shape[0]
    if side != config.side:
        raise UsageError(f"dataset images are {side}x{side} but config side is {config.side}")
    model = FlowModel(channels=3, patch=config.patch, hidden=config.hidden, seed=config.seed)
    model, losses = train(training_stream(groups, config.seed), config, model)
    ckpt = Path(args.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, model, config)
    curve = Path(args.loss_csv) if args.loss_csv else ckpt.with_name(ckpt.stem + "_loss.csv")
    curve.write_text("step,loss\n" + "".join(f"{i},{v:.8f}\n" for i, v in enumerate(losses)), encoding="utf-8")
    plot_loss_curve(losses, curve.with_suffix(".png"), config.smoothing_window)
    if losses:
        s = smoothed(losses, config.smoothing_window)
        print(f"trained {len(losses)} steps: smoothed loss {s[0]:.4f} -> {s[-1]:.4f} ({s[-1] / s[0]:.1%})")
    else:
        print("no training steps; wrote initial checkpoint")
    print(f"checkpoint {ckpt}, loss curve {curve}")
    return 0


def cmd_sample(args):
    from .toyflow import build_conditioning, load_checkpoint, sample, to_planes

    model, _ = load_checkpoint(_need_file(args.checkpoint, "--checkpoint"))
    _, groups = _load_groups(args.manifest)
    by_id = {g.scene_id: g for g in groups}
    group = by_id.get(args.scene_id) if args.scene_id else groups[0]
    if group is None:
        raise UsageError(f"--scene-id {args.scene_id!r} not in manifest")
    if not 0 <= args.variant < len(group.variants):
        raise UsageError(f"--variant must lie in [0, {len(group.variants) - 1}]")
    var = group.variants[args.variant]
    if args.task == "remove":
        source, albedo, traits, task = var.render.image, np.zeros_like(var.projected_albedo), None, "remove"
    else:
        source, albedo, traits = group.original.image, var.projected_albedo, var.coating.traits
        task = "add_uniform" if var.coating.is_uniform else "add_textured"
    cond = build_conditioning(to_planes(source), to_planes(albedo), group.mask, model.patch)
    img = sample(model, cond, traits, args.steps, Rng(args.seed), task=task)
    _write_image(args.out, img)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args):
    from .toyflow import grad_check, reference_instance

    model, batch = reference_instance(args.seed)
    err = grad_check(model, batch)
    print(f"parameters: {model.n_params}")
    print(f"max relative error: {err:.3e}")
    return 0 if err < 1e-4 else 1


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="coatsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"coatsim {__version__}")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic coating dataset")
    g.add_argument("--config", help="dataset config JSON (DatasetConfig field names)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.add_argument("--groups", type=int, help="override number of scene groups")
    g.add_argument("--variants", type=int, help="override coated variants per group")
    g.add_argument("--resolution", type=int, help="override image side length")
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("coat", help="render a scene with a coating")
    c.add_argument("--scene", required=True, help="scene JSON file, or builtin:test")
    src = c.add_mutually_exclusive_group()
    src.add_argument("--albedo", help="coat albedo texture (PNG or .f32)")
    src.add_argument("--color", type=_floats(3), default=(0.8, 0.1, 0.1), help="uniform coat color r,g,b")
    c.add_argument("--mask", help="coat mask (PNG or .f32); default: whole object")
    c.add_argument("--coverage", type=_unit_float, default=1.0, help="random mask coverage when --mask is absent")
    c.add_argument("--seed", type=int, default=0)
    for trait, default in (("roughness", 0.5), ("metalness", 0.0), ("transmission", 0.0), ("thickness", 0.0)):
        c.add_argument(f"--{trait}", type=_unit_float, default=default)
    c.add_argument("--out", required=True, help="output image (.png preview or .f32)")
    c.set_defaults(func=cmd_coat)

    b = sub.add_parser("baseline", help="apply a Photoshop-style coating baseline")
    b.add_argument("--method", required=True, choices=("blend_if", "color_blend"))
    b.add_argument("--base", required=True)
    b.add_argument("--coat", required=True, help="coat layer image, e.g. a projected albedo")
    b.add_argument("--mask", required=True)
    b.add_argument("--blend-if-thresholds", type=_floats(4), default=DEFAULT_BLEND_IF_THRESHOLDS,
                   metavar="LO0,LO1,HI0,HI1")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("eval", help="per-channel PSNR report over a dataset")
    e.add_argument("--manifest", required=True)
    e.add_argument("--methods", required=True, help="comma list of oracle,blend_if,color_blend,identity,toy")
    e.add_argument("--out", required=True, help="report CSV (text table and figure are written alongside)")
    e.add_argument("--checkpoint", help="toy model checkpoint")
    e.add_argument("--blend-if-thresholds", type=_floats(4), default=DEFAULT_BLEND_IF_THRESHOLDS,
                   metavar="LO0,LO1,HI0,HI1")
    e.add_argument("--sample-steps", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("train", help="train the toy flow model")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", help="TrainConfig JSON")
    t.add_argument("--preset", choices=("toy", "default"), default="toy",
                   help="toy: lr 3e-3, 50 warmup steps; default: the TrainConfig defaults (lr 1e-4, 300 warmup steps)")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint", required=True, help="output checkpoint path")
    t.add_argument("--loss-csv", help="loss curve CSV (default: next to the checkpoint)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample the toy model on a dataset scene")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--scene-id")
    s.add_argument("--variant", type=int, default=0)
    s.add_argument("--task", choices=("add", "remove"), default="add")
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the toy model gradients")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        set_default_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"coatsim {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"coatsim {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
