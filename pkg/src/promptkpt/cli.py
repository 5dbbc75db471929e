"""Command-line entry point: unify, synth, train, infer, evaluate.

Configuration precedence (lowest to highest): built-in defaults, the JSON
file given by ``--config`` (or ``$PROMPTKPT_CONFIG``), then command-line
flags. Exit codes: 0 success, 1 runtime error, 2 validation or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from io import BytesIO
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .blocks import ConfigError
from .config import CONFIG_ENV, Config, config_keys, desk_config, flatten, load_config
from .data.schema import LoadError, dump_json, load_coco_like
from .data.synth import TEMPLATES, GenerationError, write_synth_dataset
from .data.unify import RenameMap, UnifyError, unify
from .geometry import GeometryError
from .io import (CheckpointError, RunManifest, atomic_write, digest_inputs, dumps, load_checkpoint,
                 manifest_path, predictions_document, predictions_from_document, save_checkpoint)
from .metrics import MetricError
from .prompts import PromptError, TextPrompt

log = logging.getLogger("promptkpt")

VALIDATION_ERRORS = (ConfigError, LoadError, UnifyError, PromptError, CheckpointError, GeometryError,
                     MetricError, FileNotFoundError, ValueError)

# config sections each subcommand reads
HONORED = {
    "train": ("model", "loss", "train"),
    "infer": ("eval",),
    "evaluate": ("loss", "eval"),
}


class UsageError(ValueError):
    pass


def _keys_epilog(command: str) -> str:
    sections = HONORED.get(command, ())
    keys = [k for k in config_keys() if k.split(".")[0] in sections]
    if not keys:
        return ""
    return ("config keys honored (set with --set KEY=VALUE or in the --config file):\n  "
            + "\n  ".join(keys) + f"\n\ndefault config file: ${CONFIG_ENV}")


def _parse_sets(pairs: Sequence[str]) -> dict[str, Any]:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise ConfigError(f"--set expects KEY=VALUE, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve_config(args, base: Config, flags: dict[str, Any] | None = None,
                    sections: Sequence[str] | None = None) -> Config:
    """``base`` < config file < flags; ``sections`` limits what the file and
    ``--set`` may change (a checkpoint's architecture is fixed)."""
    overrides = {k: v for k, v in (flags or {}).items() if v is not None}
    overrides.update(_parse_sets(getattr(args, "set", None)))
    return load_config(getattr(args, "config", None), overrides, base=base, sections=sections)


def _finish(args, outputs: dict[str, Path], cfg: Config | None, seed: int | None, inputs, started: str,
            manifest_for: Path) -> None:
    m = RunManifest(command=list(args.argv), config=cfg.to_dict() if cfg else None, seed=seed,
                    inputs=digest_inputs(inputs), outputs=digest_inputs(outputs.values()),
                    started=started, finished=RunManifest.now())
    m.write(manifest_path(manifest_for))
    for name, path in outputs.items():
        log.info("wrote %s: %s", name, path)


def _dataset_file(path) -> Path:
    path = Path(path)
    return path / "annotations.json" if path.is_dir() else path


# ------------------------------------------------------------------- commands


def cmd_unify(args) -> int:
    started = RunManifest.now()
    renames = RenameMap.load(args.rename_map) if args.rename_map else RenameMap()
    datasets = []
    for p in args.inputs:
        ds = load_coco_like(p)
        if not ds.name or ds.name == str(p):
            ds = ds.replace(name=Path(p).stem)
        datasets.append(ds)
    unified, report = unify(datasets, renames, args.name)
    out = Path(args.out)
    doc = unified.to_dict()
    for im in doc["images"]:  # image paths relative to the output directory
        if im["file_name"]:
            src = Path(unified.root or ".") / im["file_name"]
            im["file_name"] = os.path.relpath(src.resolve(), out.resolve())
    data_path = atomic_write(out / "unified.json", dump_json(doc))
    stats_path = atomic_write(out / "stats.json", dumps(report))
    print(json.dumps(report["unified"]))
    _finish(args, {"dataset": data_path, "stats": stats_path}, None, None,
            list(args.inputs) + ([args.rename_map] if args.rename_map else []), started, out)
    return 0


def cmd_synth(args) -> int:
    started = RunManifest.now()
    templates = [t.strip() for t in args.templates.split(",") if t.strip()]
    unknown = [t for t in templates if t not in TEMPLATES]
    if unknown:
        raise UsageError(f"unknown templates {unknown}; choose from {sorted(TEMPLATES)}")
    if args.min_objects < 1 or args.max_objects < args.min_objects:
        raise UsageError("need 1 <= --min-objects <= --max-objects")
    out = Path(args.out)
    write_synth_dataset(out, args.seed, args.n_images, templates, args.size,
                        (args.min_objects, args.max_objects), writer=atomic_write)
    _finish(args, {"dataset": out / "annotations.json", "images": out / "images"}, None, args.seed, [],
            started, out)
    return 0


def _train_flags(args) -> dict[str, Any]:
    return {"train.steps": args.steps, "train.seed": args.seed, "train.lr": args.lr,
            "train.batch_size": args.batch_size, "train.modality_prob": args.modality_prob}


def cmd_train(args) -> int:
    import torch

    from .pipeline import SceneSet, build_model, train

    started = RunManifest.now()
    torch.set_num_threads(1)
    base = desk_config() if args.preset == "desk" else Config()
    cfg = _resolve_config(args, base, _train_flags(args))
    data_file = _dataset_file(args.data)
    ds = load_coco_like(data_file)
    data = SceneSet(ds)
    model = build_model(cfg.model, data.prompt_texts(), cfg.train.seed)
    history = train(model, data, cfg)
    out = Path(args.out)
    ckpt = save_checkpoint(out, model, cfg, data.categories)
    hist = atomic_write(out.with_name(out.name + ".history.json"), dumps(history))
    print(json.dumps(history[-1] if history else {}))
    _finish(args, {"checkpoint": ckpt, "history": hist}, cfg, cfg.train.seed, [data_file, data_file.parent / "images"],
            started, out)
    return 0


def _prompt_from_spec(spec: str, style: str = ""):
    """Inline ``"class: kpt, kpt; class2: ..."`` text, or a path to a visual
    prompt document (COCO-convention file whose annotations are exemplars)."""
    from .pipeline import SceneSet

    path = Path(spec)
    if path.suffix == ".json" and path.exists():
        ds = load_coco_like(path)
        data = SceneSet(ds)
        seen, prompts = set(), []
        for k, scene in enumerate(data.scenes):
            for i, c in enumerate(scene.categories):
                if c not in seen:
                    seen.add(c)
                    prompts.append((k, i, data))
        if not prompts:
            raise PromptError(f"visual prompt file {spec} has no annotations")
        return "visual", prompts
    return "text", TextPrompt.parse(spec, style)


def _histogram(scores, bins: int = 10) -> dict[str, Any]:
    counts, edges = np.histogram(np.asarray(scores, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return {"edges": [round(float(e), 6) for e in edges], "counts": counts.tolist()}


def _render_overlay(pixels: np.ndarray, dets, skeletons: dict[str, list], scale: int = 4) -> bytes:
    from PIL import Image, ImageDraw

    im = Image.fromarray(pixels).convert("RGB")
    im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(im)
    W, H = im.size
    for d in dets:
        x1, y1, x2, y2 = d.box.to_xyxy()
        draw.rectangle([x1 * W, y1 * H, x2 * W, y2 * H], outline=(255, 0, 0), width=2)
        draw.text((x1 * W + 2, y1 * H + 1), f"{d.class_name} {d.score:.2f}", fill=(255, 0, 0))
        pts = [(x * W, y * H) for x, y in d.kpt_coords.tolist()]
        for a, b in skeletons.get(d.class_name, []):
            if a < len(pts) and b < len(pts):
                draw.line([pts[a], pts[b]], fill=(0, 0, 0), width=2)
        for x, y in pts:
            draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=(255, 255, 255), outline=(0, 0, 0))
    buf = BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def cmd_infer(args) -> int:
    import torch

    from .model import image_to_tensor
    from .pipeline import infer

    started = RunManifest.now()
    torch.set_num_threads(1)
    model, cfg, cats = load_checkpoint(args.checkpoint)
    cfg = _resolve_config(args, cfg, {"eval.threshold": args.tau}, HONORED["infer"])
    tau = cfg.eval.threshold
    modality, prompt = _prompt_from_spec(args.prompt, args.style)
    if modality == "visual":
        prompt = [data.visual_prompt(k, i, model.cfg.prompt_resolution) for k, i, data in prompt]
    images = []
    if args.data:
        ds = load_coco_like(_dataset_file(args.data))
        images = [(im.id, ds.image_path(im)) for im in ds.images]
    for p in args.image or ():
        images.append((len(images) + 1, Path(p)))
    if not images:
        raise UsageError("give --image or --data")
    from PIL import Image

    dets_by_image, names, all_scores, overlays = {}, {}, [], {}
    for image_id, path in images:
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"))
        scores: list[float] = []
        dets = infer(model, image_to_tensor(pixels), prompt, tau, cfg.eval.max_detections, scores_out=scores)
        all_scores += scores
        dets_by_image[image_id] = dets
        names[image_id] = str(path.name)
        overlays[image_id] = (pixels, dets)
    out = Path(args.out)
    doc = predictions_document(dets_by_image, tau, modality, names)
    preds = atomic_write(out, dumps(doc))
    hist = _histogram(all_scores)
    hist_path = atomic_write(out.with_name(out.stem + ".scores.json"), dumps(hist))
    skeletons = {c.name: c.skeleton for c in cats}
    first = next(iter(overlays))
    overlay = atomic_write(out.with_name(out.stem + ".overlay.png"), _render_overlay(*overlays[first], skeletons))
    n = sum(len(v) for v in dets_by_image.values())
    print(f"{n} detections at tau={tau}")
    print("score histogram (all queries):")
    for lo, hi, c in zip(hist["edges"][:-1], hist["edges"][1:], hist["counts"]):
        print(f"  [{lo:.1f}, {hi:.1f}) {c}")
    _finish(args, {"predictions": preds, "scores": hist_path, "overlay": overlay}, cfg, None,
            [args.checkpoint] + [p for _, p in images], started, out)
    return 0


def cmd_evaluate(args) -> int:
    import torch

    from .pipeline import SceneSet, evaluate, score_predictions

    started = RunManifest.now()
    torch.set_num_threads(1)
    if bool(args.checkpoint) == bool(args.predictions):
        raise UsageError("give exactly one of --checkpoint or --predictions")
    data_file = _dataset_file(args.data)
    ds = load_coco_like(data_file)
    data = SceneSet(ds)
    inputs = [data_file, data_file.parent / "images"]
    if args.checkpoint:
        model, cfg, _ = load_checkpoint(args.checkpoint)
        cfg = _resolve_config(args, cfg, {"eval.threshold": args.tau, "eval.workers": args.workers},
                              HONORED["evaluate"])
        report, _ = evaluate(model, data, cfg, args.modality, args.seed, with_alignment=not args.no_alignment)
        inputs.append(args.checkpoint)
    else:
        cfg = _resolve_config(args, Config(), {"eval.workers": args.workers}, HONORED["evaluate"])
        doc = json.loads(Path(args.predictions).read_text(encoding="utf-8"))
        report = score_predictions(predictions_from_document(doc), data.ground_truths(), cfg.eval)
        inputs.append(args.predictions)
    out = Path(args.out)
    metrics = atomic_write(out, dumps(report.to_dict()))
    print(json.dumps({"pck": report.pck, "ap": report.ap}))
    _finish(args, {"metrics": metrics}, cfg, args.seed, inputs, started, out)
    return 0


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptkpt", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, func):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=_keys_epilog(name),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    def add_config(p):
        p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = add("unify", "merge annotation files into one unified dataset", cmd_unify)
    p.add_argument("inputs", nargs="+", help="COCO-convention or unified annotation files")
    p.add_argument("--rename-map", help="JSON keypoint rename map")
    p.add_argument("--name", default="unified")
    p.add_argument("--out", required=True, help="output directory")

    p = add("synth", "generate a synthetic scene dataset", cmd_synth)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-images", type=int, default=16)
    p.add_argument("--templates", default=",".join(TEMPLATES))
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--min-objects", type=int, default=2)
    p.add_argument("--max-objects", type=int, default=4)
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", "train a model on a dataset", cmd_train)
    p.add_argument("--data", required=True, help="annotation file or dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--preset", choices=("desk", "full"), default="desk",
                   help="starting defaults: small desk-scale model or the full-size one")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--modality-prob", type=float)
    add_config(p)

    p = add("infer", "detect prompted objects and keypoints", cmd_infer)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True,
                   help="inline 'class: kpt, kpt; class2: ...' or a visual-prompt annotation file")
    p.add_argument("--style", default="", help="style word for textual templates")
    p.add_argument("--image", action="append", help="image file (repeatable)")
    p.add_argument("--data", help="run on every image of an annotation file or dataset directory")
    p.add_argument("--tau", type=float, help="object score threshold (eval.threshold)")
    p.add_argument("--out", required=True, help="predictions JSON path")
    add_config(p)

    p = add("evaluate", "score a checkpoint or a predictions file", cmd_evaluate)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions")
    p.add_argument("--modality", choices=("text", "visual"), default="text")
    p.add_argument("--seed", type=int, default=0, help="exemplar sampling seed for visual prompts")
    p.add_argument("--tau", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-alignment", action="store_true", help="skip alignment scores")
    p.add_argument("--out", required=True, help="metrics JSON path")
    add_config(p)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = ["promptkpt", *argv]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GenerationError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
