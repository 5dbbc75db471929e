"""Procedural scenes of capsule-limbed figures with exact keypoint ground truth.

Coordinates are snapped to a dyadic grid (multiples of ``2**-12``) so that
normalized/pixel conversions, box format changes and horizontal flips are
exact in floating point.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..geometry import AnnotatedImage, Box
from .schema import Annotation, CategorySpec, ImageRecord, UniKPTDataset, dump_json, to_coco_dict

GRID = 2.0 ** -12
MAX_ATTEMPTS = 100
SCENE_RETRIES = 20


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Template:
    """A parametric skeleton: canonical keypoints in a unit frame (x scaled by
    ``aspect``), limbs as index pairs, and a per-limb thickness multiplier."""

    name: str
    keypoint_names: tuple[str, ...]
    points: tuple[tuple[float, float], ...]
    limbs: tuple[tuple[int, int], ...]
    aspect: float
    color: tuple[int, int, int]
    thick: tuple[float, ...] = ()

    @property
    def swap_pairs(self) -> list[tuple[int, int]]:
        pairs = []
        for i, n in enumerate(self.keypoint_names):
            if n.startswith("left ") or " left " in f" {n} ":
                j = self.keypoint_names.index(n.replace("left", "right"))
                pairs.append((i, j))
        return pairs

    def side(self, i: int) -> int:
        """+1 for left keypoints, -1 for right, 0 for midline."""
        words = self.keypoint_names[i].split()
        return 1 if "left" in words else -1 if "right" in words else 0

    def category(self, cat_id: int) -> CategorySpec:
        return CategorySpec(cat_id, self.name, list(self.keypoint_names), self.swap_pairs, list(self.limbs))


BIPED = Template(
    "biped",
    ("head", "left shoulder", "right shoulder", "left elbow", "right elbow", "left wrist", "right wrist",
     "left hip", "right hip", "left knee", "right knee", "left ankle", "right ankle"),
    ((0.5, 0.06), (0.7, 0.22), (0.3, 0.22), (0.84, 0.4), (0.16, 0.4), (0.9, 0.57), (0.1, 0.57),
     (0.63, 0.55), (0.37, 0.55), (0.66, 0.76), (0.34, 0.76), (0.67, 0.95), (0.33, 0.95)),
    ((0, 1), (0, 2), (1, 2), (1, 3), (3, 5), (2, 4), (4, 6), (1, 7), (2, 8), (7, 8), (7, 9), (9, 11),
     (8, 10), (10, 12)),
    0.55, (200, 60, 50),
)
QUADRUPED = Template(
    "quadruped",
    ("nose", "neck", "tail base", "tail tip", "left front knee", "right front knee", "left front paw",
     "right front paw", "left hind knee", "right hind knee", "left hind paw", "right hind paw"),
    ((0.98, 0.22), (0.78, 0.3), (0.14, 0.34), (0.02, 0.08), (0.8, 0.64), (0.68, 0.66), (0.82, 0.95),
     (0.66, 0.95), (0.27, 0.64), (0.14, 0.66), (0.28, 0.95), (0.12, 0.95)),
    ((0, 1), (1, 2), (2, 3), (1, 4), (4, 6), (1, 5), (5, 7), (2, 8), (8, 10), (2, 9), (9, 11)),
    1.4, (60, 150, 60), (1.0, 1.8, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0),
)
CHAIR = Template(
    "chair",
    ("seat front left", "seat front right", "seat back left", "seat back right", "front left leg",
     "front right leg", "back left leg", "back right leg", "backrest top left", "backrest top right"),
    ((0.86, 0.58), (0.14, 0.58), (0.7, 0.45), (0.3, 0.45), (0.86, 0.98), (0.14, 0.98), (0.7, 0.85),
     (0.3, 0.85), (0.7, 0.03), (0.3, 0.03)),
    ((0, 1), (2, 3), (0, 2), (1, 3), (0, 4), (1, 5), (2, 6), (3, 7), (2, 8), (3, 9), (8, 9)),
    0.8, (60, 70, 190),
)
TEMPLATES = {t.name: t for t in (BIPED, QUADRUPED, CHAIR)}


@dataclass
class SynthScene:
    image: AnnotatedImage
    names: list[str]  # template name per instance
    masks: np.ndarray  # (N, H, W) bool, each figure's own pixels before occlusion


def _snap(v):
    return np.round(np.asarray(v, dtype=np.float64) / GRID) * GRID


def _tint(color, side):
    c = np.array(color, dtype=np.float64)
    if side > 0:
        c = 0.55 * c + 0.45 * np.array([255, 220, 0])
    elif side < 0:
        c = 0.55 * c + 0.45 * np.array([0, 200, 255])
    return c.astype(np.uint8)


def _capsule_mask(px, py, a, b, r):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0, 1)
    dx = px - (a[0] + t * ab[0])
    dy = py - (a[1] + t * ab[1])
    return dx * dx + dy * dy <= r * r


def _pose(rng, t: Template, size: int, scale_range):
    """Random scale, jitter and position; returns snapped points and radius."""
    h = rng.uniform(*scale_range)
    w = h * t.aspect
    if w > 0.7:
        h, w = h * 0.7 / w, 0.7
    pts = np.array(t.points) + rng.normal(0.0, 0.025, size=(len(t.points), 2))
    pts = np.clip(pts, 0.0, 1.0) * [w, h]
    r = 1.6 / size
    margin = 3.0 * r + 1.0 / size
    x0 = rng.uniform(margin, 1 - margin - w)
    y0 = rng.uniform(margin, 1 - margin - h)
    return _snap(pts + [x0, y0]), _snap(r)


def _figure_mask(t, pts, r, px, py):
    thick = t.thick or (1.0,) * len(t.limbs)
    masks = [_capsule_mask(px, py, pts[i], pts[j], r * k) for (i, j), k in zip(t.limbs, thick)]
    return masks


def synth_scene(rng: np.random.Generator, n_objects: int, template_set: Sequence[str] = tuple(TEMPLATES),
                size: int = 64, min_visible: float = 0.6, max_iou: float = 0.3,
                scale_range=(0.32, 0.48)) -> SynthScene:
    """Render ``n_objects`` figures drawn from ``template_set`` onto a plain background.

    Later figures are drawn on top. A keypoint is visible when the pixel
    containing it still shows its own figure. Placements overlapping an
    existing box by more than ``max_iou``, or leaving any figure with less
    than ``min_visible`` of its pixels or no visible keypoint, are rejected.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    templates = [TEMPLATES[n] if isinstance(n, str) else n for n in template_set]
    if not templates:
        raise ValueError("empty template set")
    ys, xs = np.mgrid[0:size, 0:size]
    px, py = (xs + 0.5) / size, (ys + 0.5) / size
    bg = int(rng.integers(215, 246))
    owner = np.full((size, size), -1, dtype=np.int64)
    pixels = np.full((size, size, 3), bg, dtype=np.uint8)
    placed: list[tuple[Template, np.ndarray, float, np.ndarray, list]] = []
    boxes: list[np.ndarray] = []
    for k in range(n_objects):
        t = templates[int(rng.integers(len(templates)))]
        for _ in range(MAX_ATTEMPTS):
            pts, r = _pose(rng, t, size, scale_range)
            lo = _snap(pts.min(0) - r)
            hi = _snap(pts.max(0) + r)
            box = np.concatenate([lo, hi])
            if any(_iou(box, b) > max_iou for b in boxes):
                continue
            limb_masks = _figure_mask(t, pts, r, px, py)
            mask = np.logical_or.reduce(limb_masks)
            trial = owner.copy()
            trial[mask] = k
            if all(_visible_ok(trial, i, m, p, min_visible) for i, (_, p, _, m, _) in enumerate(placed)) \
                    and _visible_ok(trial, k, mask, pts, min_visible):
                break
        else:
            raise GenerationError(f"could not place figure {k + 1} of {n_objects} after {MAX_ATTEMPTS} tries")
        owner = trial
        for (i, j), m in zip(t.limbs, limb_masks):
            side = t.side(i) if t.side(i) == t.side(j) else 0
            pixels[m] = _tint(t.color, side)
        placed.append((t, pts, r, mask, limb_masks))
        boxes.append(box)
    cat_ids, kpts, out_boxes = [], [], []
    for k, (t, pts, r, mask, _) in enumerate(placed):
        vis = _keypoint_owner(owner, pts) == k
        kpts.append(np.concatenate([pts, vis[:, None].astype(np.float64)], 1))
        x1, y1, x2, y2 = boxes[k]
        out_boxes.append([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])
        cat_ids.append(templates.index(t))
    names = [p[0].name for p in placed]
    image = AnnotatedImage(pixels, np.array(out_boxes, dtype=np.float64), kpts, cat_ids)
    return SynthScene(image, names, np.stack([p[3] for p in placed]))


def _keypoint_owner(owner: np.ndarray, pts: np.ndarray) -> np.ndarray:
    size = owner.shape[0]
    ij = np.clip(np.floor(pts * size).astype(int), 0, size - 1)
    return owner[ij[:, 1], ij[:, 0]]


def _visible_ok(owner, k, mask, pts, min_visible) -> bool:
    total = mask.sum()
    if total == 0 or (owner[mask] == k).sum() < min_visible * total:
        return False
    return bool((_keypoint_owner(owner, pts) == k).any())


def _iou(a, b) -> float:
    lt = np.maximum(a[:2], b[:2])
    rb = np.minimum(a[2:], b[2:])
    inter = np.prod(np.clip(rb - lt, 0, None))
    union = np.prod(a[2:] - a[:2]) + np.prod(b[2:] - b[:2]) - inter
    return float(inter / union)


def synth_dataset(seed: int, n_images: int, template_set: Sequence[str] = tuple(TEMPLATES), size: int = 64,
                  objects=(2, 4)) -> tuple[UniKPTDataset, list[np.ndarray]]:
    """A seeded set of scenes with ``objects[0]..objects[1]`` figures each.

    Category ids are 1-based positions in ``template_set``. A scene whose
    placement fails is redrawn from the same stream, up to ``SCENE_RETRIES``
    times.
    """
    rng = np.random.default_rng(seed)
    names = [t for t in template_set]
    cats = [TEMPLATES[n].category(i + 1) for i, n in enumerate(names)]
    images, anns, pixels = [], [], []
    for i in range(n_images):
        n = int(rng.integers(objects[0], objects[1] + 1))
        for attempt in range(SCENE_RETRIES):
            try:
                scene = synth_scene(rng, n, names, size)
                break
            except GenerationError:
                if attempt == SCENE_RETRIES - 1:
                    raise
        image_id = i + 1
        images.append(ImageRecord(image_id, f"images/{image_id:05d}.png", size, size))
        pixels.append(scene.image.pixels)
        for box, kp, c in zip(scene.image.boxes, scene.image.keypoints, scene.image.category_ids):
            anns.append(Annotation(len(anns) + 1, image_id, c + 1, Box(*map(float, box)), kp))
    return UniKPTDataset(cats, images, anns, "synthetic", "image"), pixels


def write_synth_dataset(out_dir, seed: int, n_images: int, template_set: Sequence[str] = tuple(TEMPLATES),
                        size: int = 64, objects=(2, 4), writer=None) -> UniKPTDataset:
    """Write PNG images and a COCO-convention ``annotations.json`` under ``out_dir``.

    ``writer(path, bytes)`` defaults to a plain write; the CLI passes an
    atomic one.
    """
    from io import BytesIO

    from PIL import Image

    out = Path(out_dir)
    ds, pixels = synth_dataset(seed, n_images, template_set, size, objects)
    writer = writer or (lambda p, data: Path(p).write_bytes(data))
    (out / "images").mkdir(parents=True, exist_ok=True)
    for im, px in zip(ds.images, pixels):
        buf = BytesIO()
        Image.fromarray(px).save(buf, format="PNG")
        writer(out / im.file_name, buf.getvalue())
    doc = to_coco_dict(ds)
    doc["name"] = ds.name
    writer(out / "annotations.json", dump_json(doc).encode())
    return ds.replace(root=out)


def scene_to_json(scene: SynthScene) -> str:
    return json.dumps({"boxes": scene.image.boxes.tolist(),
                       "keypoints": [k.tolist() for k in scene.image.keypoints],
                       "names": scene.names})
