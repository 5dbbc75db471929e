"""Training, inference and evaluation loops around :class:`PromptPoseModel`."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .config import Config, EvalConfig, ModelConfig
from .data.schema import CategorySpec, UniKPTDataset
from .geometry import AnnotatedImage, Box, hflip
from .losses import (CostWeights, LossBreakdown, SetPrediction, Targets, hungarian, match_cost,
                     total_loss)
from .metrics import (EvalReport, GroundTruth, MetricError, Prediction, evaluate_ap, evaluate_pck,
                      rescaled_cosine)
from .model import PromptPoseModel, image_to_tensor, resize_image
from .prompts import (ClassPrompt, PromptError, PromptFeatures, TextPrompt, VisualPrompt, Vocabulary,
                      crop_exemplar, render_template)

log = logging.getLogger(__name__)


@dataclass
class Detection:
    """One detected object.

    ``kpt_coords`` has one row per keypoint of ``class_index``'s slice and
    ``kpt_logits`` one row per keypoint over all keypoint prompt rows.
    """

    obj_logits: Tensor  # (L,)
    box: Box
    kpt_coords: Tensor  # (K, 2)
    kpt_logits: Tensor  # (K, K_total)
    class_index: int
    class_name: str
    score: float
    keypoint_names: list[str] = field(default_factory=list)
    row_start: int = 0  # first keypoint prompt row of the class slice

    @property
    def kpt_scores(self) -> Tensor:
        """Sigmoid of each keypoint query's logit against its own identity row."""
        return self.kpt_logits.sigmoid().diagonal(self.row_start)


# --------------------------------------------------------------------------- data


@dataclass
class Scene:
    image_id: int
    pixels: np.ndarray  # (H, W, 3) uint8
    boxes: np.ndarray  # (N, 4) cxcywh
    keypoints: list[np.ndarray]
    categories: list[int]  # indices into SceneSet.categories

    def annotated(self) -> AnnotatedImage:
        return AnnotatedImage(self.pixels, self.boxes, self.keypoints, self.categories)


class SceneSet:
    """A dataset held in memory: pixels plus per-image ground truth, with
    categories re-indexed ``0..L-1`` in dataset order."""

    def __init__(self, ds: UniKPTDataset, pixels: Sequence[np.ndarray] | None = None):
        self.dataset = ds
        self.categories: list[CategorySpec] = list(ds.categories)
        index = {c.id: i for i, c in enumerate(self.categories)}
        self.scenes: list[Scene] = []
        for k, im in enumerate(ds.images):
            px = pixels[k] if pixels is not None else ds.load_pixels(im)
            anns = ds.annotations_for(im.id)
            boxes = np.array([[a.box.cx, a.box.cy, a.box.w, a.box.h] for a in anns], dtype=np.float64)
            self.scenes.append(Scene(im.id, px, boxes.reshape(-1, 4), [a.keypoints.copy() for a in anns],
                                     [index[a.category_id] for a in anns]))
        self._tensors: dict[int, Tensor] = {}

    def __len__(self):
        return len(self.scenes)

    def tensor(self, k: int, size: int) -> Tensor:
        if k not in self._tensors:
            self._tensors[k] = resize_image(image_to_tensor(self.scenes[k].pixels), size)
        return self._tensors[k]

    def class_prompt(self, c: int) -> ClassPrompt:
        cat = self.categories[c]
        return ClassPrompt(cat.name, list(cat.keypoint_names))

    def text_prompt(self, cats: Sequence[int], style: str = "") -> TextPrompt:
        return TextPrompt(style, [self.class_prompt(c) for c in cats])

    def exemplars(self, c: int, exclude: int) -> list[tuple[int, int]]:
        """``(scene, instance)`` pairs of category ``c`` outside scene ``exclude``
        with at least one visible keypoint."""
        return [(k, i) for k, s in enumerate(self.scenes) if k != exclude
                for i, cc in enumerate(s.categories) if cc == c and (s.keypoints[i][:, 2] > 0).any()]

    def visual_prompt(self, k: int, i: int, resolution: int) -> VisualPrompt:
        s = self.scenes[k]
        crop, kp = crop_exemplar(image_to_tensor(s.pixels), s.boxes[i], s.keypoints[i], resolution)
        cat = self.categories[s.categories[i]]
        return VisualPrompt(crop, kp, list(cat.keypoint_names), cat.name)

    def ground_truths(self) -> list[GroundTruth]:
        return [GroundTruth(s.image_id, self.categories[c].name, b, kp)
                for s in self.scenes for b, kp, c in zip(s.boxes, s.keypoints, s.categories)]

    def prompt_texts(self) -> list[str]:
        texts = []
        for c in self.categories:
            texts.append(render_template("", c.name))
            for k in c.keypoint_names:
                texts += [render_template("", k), render_template("", c.name, keypoint=k)]
        return texts


def build_model(cfg: ModelConfig, texts: Sequence[str], seed: int = 0) -> PromptPoseModel:
    torch.manual_seed(seed)
    return PromptPoseModel(cfg, Vocabulary.from_texts(texts))


def targets_for(scene: Scene, cats: Sequence[int], flip: AnnotatedImage | None = None) -> Targets:
    """Ground truth with classes re-indexed into the prompt order ``cats``."""
    src = flip or scene.annotated()
    pos = {c: j for j, c in enumerate(cats)}
    return Targets(torch.tensor(np.asarray(src.boxes).reshape(-1, 4), dtype=torch.float32),
                   torch.tensor([pos[c] for c in src.category_ids], dtype=torch.long),
                   [torch.tensor(k, dtype=torch.float32) for k in src.keypoints])


def flat_keypoint_names(prompts: PromptFeatures) -> list[str]:
    return [k for names in prompts.keypoint_names for k in names]


# ----------------------------------------------------------------------- training


def image_loss(model: PromptPoseModel, image: Tensor, prompts: PromptFeatures, tg: Targets,
               cfg: Config) -> LossBreakdown:
    """Forward one image, match per object layer, decode keypoints for the
    chosen groups and return the loss."""
    weights = CostWeights.from_config(cfg.loss)
    objects = model.detect_objects(image, prompts)
    matches = [hungarian(match_cost(l, b, tg, weights))
               for l, b in zip(objects.layer_logits, objects.queries.layer_boxes)]
    final = matches[-1]
    gt_class = {p: int(tg.classes[g]) for p, g in final.pairs}
    if cfg.model.train_keypoint_groups == "matched":
        owners = [p for p, _ in final.pairs]
    else:
        owners = list(range(objects.logits.shape[0]))
    argmax = objects.logits.argmax(-1).tolist()
    classes = [gt_class.get(o, argmax[o]) for o in owners]
    kout = model.detect_keypoints(objects, owners, classes)
    kq = kout.queries
    pred = SetPrediction(objects.layer_logits, objects.queries.layer_boxes, kq.layer_points, kout.layer_logits,
                         kq.owner, kq.row, kq.slot)
    return total_loss(pred, tg, cfg.loss, matches=matches, keypoint_names=flat_keypoint_names(prompts),
                      slices=prompts.slices)


def train_step(model: PromptPoseModel, optimizer: torch.optim.Optimizer, data: SceneSet, batch: Sequence[int],
               rng: np.random.Generator, cfg: Config) -> LossBreakdown:
    """One optimizer update on ``batch`` (scene indices).

    A single coin flip chooses the modality for the whole step. The textual
    path prompts with every category present in the batch; the visual path
    prompts each image with one exemplar per category, cropped from a
    different image. If some category has no exemplar elsewhere the step
    falls back to text.
    """
    tc = cfg.train
    visual = bool(rng.random() < tc.modality_prob)
    cats = sorted({c for k in batch for c in data.scenes[k].categories})
    picks = {}
    if visual:
        for k in batch:
            for c in cats:
                pool = data.exemplars(c, k)
                if not pool:
                    log.warning("no exemplar of %r outside image %d; using text prompts",
                                data.categories[c].name, data.scenes[k].image_id)
                    visual = False
                    break
                picks[k, c] = pool[int(rng.integers(len(pool)))]
            if not visual:
                break
    flips = {k: bool(tc.flip_prob > 0 and rng.random() < tc.flip_prob) for k in batch}
    model.train()
    optimizer.zero_grad(set_to_none=True)
    text_prompts = model.encode_prompts(data.text_prompt(cats)) if not visual else None
    parts = []
    for k in batch:
        scene = data.scenes[k]
        image = data.tensor(k, cfg.model.image_size)
        flipped = None
        if flips[k]:
            flipped = hflip(scene.annotated(), {i: data.categories[i].swap_map()
                                                for i in set(scene.categories)})
            image = image.flip(-1)
        if visual:
            prompts = model.encode_prompts([data.visual_prompt(*picks[k, c], cfg.model.prompt_resolution)
                                            for c in cats])
        else:
            prompts = text_prompts
        loss = image_loss(model, image, prompts, targets_for(scene, cats, flipped), cfg)
        (loss.total / len(batch)).backward(retain_graph=not visual and k != batch[-1])
        parts.append(loss)
    if tc.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
    optimizer.step()
    terms = [torch.stack([getattr(p, n).detach() for p in parts]).mean()
             for n in ("reg_obj", "reg_kpt", "align_obj", "align_kpt")]
    out = LossBreakdown.from_terms(*terms)
    out.info = {"modality": "visual" if visual else "text"}
    return out


def make_optimizer(model: PromptPoseModel, cfg: Config) -> torch.optim.Optimizer:
    kw = dict(lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    try:
        return torch.optim.AdamW(model.parameters(), fused=True, **kw)
    except (RuntimeError, TypeError):
        return torch.optim.AdamW(model.parameters(), **kw)


def train(model: PromptPoseModel, data: SceneSet, cfg: Config,
          callback: Callable[[int, LossBreakdown], None] | None = None) -> list[dict]:
    """Run ``cfg.train.steps`` updates; returns one history row per step."""
    tc = cfg.train
    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)
    optimizer = make_optimizer(model, cfg)
    history = []
    bs = min(tc.batch_size, len(data))
    for step in range(tc.steps):
        batch = sorted(rng.choice(len(data), size=bs, replace=False).tolist())
        loss = train_step(model, optimizer, data, batch, rng, cfg)
        row = {"step": step + 1, "modality": loss.info["modality"], **loss.as_dict()}
        history.append(row)
        if tc.log_every and (step + 1) % tc.log_every == 0:
            log.info("step %d %s total %.4f", step + 1, row["modality"], row["total"])
        if callback is not None:
            callback(step, loss)
    model.eval()
    return history


# ---------------------------------------------------------------------- inference


def resolve_prompts(model: PromptPoseModel, prompts) -> PromptFeatures:
    if isinstance(prompts, PromptFeatures):
        return prompts
    if isinstance(prompts, TextPrompt):
        if not prompts.classes:
            raise PromptError("empty prompt set")
        return model.encode_prompts(prompts)
    prompts = list(prompts)
    if not prompts:
        raise PromptError("empty prompt set")
    return model.encode_prompts(prompts)


@torch.no_grad()
def infer(model: PromptPoseModel, image: Tensor, prompts, tau: float = 0.3,
          max_detections: int | None = None, scores_out: list | None = None) -> list[Detection]:
    """Detections whose best object score reaches ``tau``, highest score first.

    ``scores_out``, when given, receives every query's best score (for
    threshold histograms).
    """
    model.eval()
    pf = resolve_prompts(model, prompts)
    image = resize_image(image, model.cfg.image_size)
    objects = model.detect_objects(image, pf)
    probs = objects.logits.sigmoid()
    scores, classes = probs.max(-1)
    if scores_out is not None:
        scores_out.extend(float(s) for s in scores)
    if tau >= 1.0:
        return []
    keep = torch.nonzero(scores >= tau).flatten().tolist()
    keep.sort(key=lambda i: (-float(scores[i]), i))
    if max_detections is not None:
        keep = keep[:max_detections]
    if not keep:
        return []
    cls = [int(classes[i]) for i in keep]
    kout = model.detect_keypoints(objects, keep, cls)
    points, logits = kout.points, kout.layer_logits[-1]
    boxes = objects.boxes
    out = []
    for g, (i, c) in enumerate(zip(keep, cls)):
        sel = kout.queries.group == g
        a, _ = pf.slices[c]
        det = Detection(objects.logits[i], Box(*(float(v) for v in boxes[i])), points[sel], logits[sel], c,
                        pf.class_names[c], float(scores[i]), list(pf.keypoint_names[c]), a)
        out.append(det)
    return out


# --------------------------------------------------------------------- evaluation


def visual_prompts_for(data: SceneSet, k: int, cats: Sequence[int], rng: np.random.Generator,
                       resolution: int) -> list[VisualPrompt]:
    """One exemplar per category drawn from images other than ``k``; categories
    without one are left out of the prompt set with a warning."""
    out = []
    for c in cats:
        pool = data.exemplars(c, k)
        if not pool:
            log.warning("no exemplar of %r outside image %d; category not prompted",
                        data.categories[c].name, data.scenes[k].image_id)
            continue
        out.append(data.visual_prompt(*pool[int(rng.integers(len(pool)))], resolution))
    return out


def predict_dataset(model: PromptPoseModel, data: SceneSet, ecfg: EvalConfig, modality: str = "text",
                    seed: int = 0) -> dict[int, list[Detection]]:
    """Detections per scene under prompts for every dataset category.

    Visual prompting draws one exemplar per category from other images with
    an RNG seeded by ``seed``; ``workers > 1`` spreads images over threads.
    """
    cats = list(range(len(data.categories)))
    text = model.encode_prompts(data.text_prompt(cats)) if modality == "text" else None
    rng = np.random.default_rng(seed)
    jobs = []
    for k in range(len(data)):
        if modality == "text":
            prompts = text
        else:
            vp = visual_prompts_for(data, k, cats, rng, model.cfg.prompt_resolution)
            if not vp:
                raise PromptError(f"no exemplar available for image {data.scenes[k].image_id}")
            prompts = vp
        jobs.append((k, prompts))

    def run(job):
        k, prompts = job
        with torch.no_grad():
            return k, infer(model, data.tensor(k, model.cfg.image_size), prompts, ecfg.threshold,
                            ecfg.max_detections)

    if ecfg.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(ecfg.workers) as pool:
            results = dict(pool.map(run, jobs))
    else:
        results = dict(map(run, jobs))
    return {data.scenes[k].image_id: results[k] for k in range(len(data))}


def to_predictions(dets: dict[int, list[Detection]]) -> list[Prediction]:
    return [Prediction(im, d.class_name, d.score, np.array([d.box.cx, d.box.cy, d.box.w, d.box.h]),
                       d.kpt_coords.detach().double().numpy())
            for im, ds in dets.items() for d in ds]


@torch.no_grad()
def alignment_score(model: PromptPoseModel, data: SceneSet, level: str = "object",
                    cfg: Config | None = None) -> float:
    """Mean rescaled cosine between ground-truth-matched query embeddings and
    their true prompt rows, under text prompts for all categories."""
    if level not in ("object", "keypoint"):
        raise ValueError("level must be 'object' or 'keypoint'")
    cfg = cfg or Config()
    model.eval()
    cats = list(range(len(data.categories)))
    pf = model.encode_prompts(data.text_prompt(cats))
    weights = CostWeights.from_config(cfg.loss)
    sims = []
    for k, scene in enumerate(data.scenes):
        tg = targets_for(scene, cats)
        if not len(tg):
            continue
        objects = model.detect_objects(data.tensor(k, model.cfg.image_size), pf)
        match = hungarian(match_cost(objects.logits, objects.boxes, tg, weights))
        rows = objects.enhanced.prompts
        pi = torch.tensor(match.pred_index)
        gc = tg.classes[match.gt_index]
        if level == "object":
            sims.append(rescaled_cosine(objects.queries.embeddings[pi], rows.obj[gc]))
        else:
            kout = model.detect_keypoints(objects, pi.tolist(), gc.tolist())
            sims.append(rescaled_cosine(kout.queries.embeddings, rows.kpt[kout.queries.row]))
    if not sims:
        raise MetricError("no matched queries")
    return float(torch.cat(sims).mean())


def evaluate(model: PromptPoseModel, data: SceneSet, cfg: Config, modality: str = "text", seed: int = 0,
             with_alignment: bool = True) -> tuple[EvalReport, dict[int, list[Detection]]]:
    dets = predict_dataset(model, data, cfg.eval, modality, seed)
    report = score_predictions(to_predictions(dets), data.ground_truths(), cfg.eval)
    if with_alignment:
        report.align_obj = alignment_score(model, data, "object", cfg)
        report.align_kpt = alignment_score(model, data, "keypoint", cfg)
    return report, dets


def score_predictions(preds: list[Prediction], gts: list[GroundTruth], ecfg: EvalConfig) -> EvalReport:
    pck = evaluate_pck(preds, gts, ecfg.pck_threshold, ecfg.iou_match)
    ap, per = evaluate_ap(preds, gts, per_threshold=True)
    return EvalReport(pck, ap, per)
