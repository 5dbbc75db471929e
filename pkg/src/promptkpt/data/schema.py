"""Unified keypoint dataset schema and COCO-convention loaders.

In memory (and in the unified document) boxes are normalized ``cxcywh`` and
keypoints are normalized ``(K, 3)`` arrays of ``x, y, visible``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from ..geometry import Box, SwapMapError, swap_map_from_pairs, visibility_from_raw

UNIFIED_FORMAT = "unikpt"


class LoadError(ValueError):
    """Raised with every problem found in an annotation document."""

    def __init__(self, problems: Iterable[str], source: str = ""):
        self.problems = list(problems)
        self.source = source
        head = f"{source}: " if source else ""
        super().__init__(head + "; ".join(self.problems))


@dataclass
class CategorySpec:
    id: int
    name: str
    keypoint_names: list[str]
    swap_pairs: list[tuple[int, int]] | None = None  # None: not declared
    skeleton: list[tuple[int, int]] = field(default_factory=list)  # 0-based
    taxonomy: dict[str, str] | None = None  # species / family / order / class

    def __post_init__(self):
        if len(set(self.keypoint_names)) != len(self.keypoint_names):
            raise LoadError([f"category {self.id} ({self.name}) has duplicate keypoint names"])
        if self.swap_pairs is not None:
            self.swap_pairs = [tuple(int(i) for i in p) for p in self.swap_pairs]
            try:
                swap_map_from_pairs(len(self.keypoint_names), self.swap_pairs)
            except SwapMapError as exc:
                raise LoadError([f"category {self.id} ({self.name}): {exc}"]) from exc
        self.skeleton = [tuple(int(i) for i in e) for e in self.skeleton]

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoint_names)

    def swap_map(self) -> list[int]:
        return swap_map_from_pairs(self.num_keypoints, self.swap_pairs or [])

    def to_dict(self) -> dict[str, Any]:
        out = {"id": self.id, "name": self.name, "keypoint_names": list(self.keypoint_names),
               "skeleton": [list(e) for e in self.skeleton]}
        if self.swap_pairs is not None:
            out["swap_pairs"] = [list(p) for p in self.swap_pairs]
        if self.taxonomy:
            out["taxonomy"] = dict(self.taxonomy)
        return out


@dataclass
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int


@dataclass
class Annotation:
    id: int
    image_id: int
    category_id: int
    box: Box
    keypoints: np.ndarray  # (K, 3) normalized x, y, visible

    def __eq__(self, other):
        return (isinstance(other, Annotation) and (self.id, self.image_id, self.category_id, self.box)
                == (other.id, other.image_id, other.category_id, other.box)
                and np.array_equal(self.keypoints, other.keypoints))


@dataclass
class UniKPTDataset:
    categories: list[CategorySpec]
    images: list[ImageRecord]
    annotations: list[Annotation]
    name: str = ""
    orientation: str = "image"  # "image" or "viewer" left/right convention
    root: Path | None = None  # directory image file names are relative to

    def __post_init__(self):
        self._cat = {c.id: c for c in self.categories}
        self._img = {im.id: im for im in self.images}

    def __eq__(self, other):
        return (isinstance(other, UniKPTDataset) and self.categories == other.categories
                and self.images == other.images and self.annotations == other.annotations
                and self.name == other.name and self.orientation == other.orientation)

    def category(self, cat_id: int) -> CategorySpec:
        return self._cat[cat_id]

    def image(self, image_id: int) -> ImageRecord:
        return self._img[image_id]

    def annotations_for(self, image_id: int) -> list[Annotation]:
        return [a for a in self.annotations if a.image_id == image_id]

    def validate(self) -> list[str]:
        problems = []
        if len(self._cat) != len(self.categories):
            problems.append("duplicate category ids")
        if len(self._img) != len(self.images):
            problems.append("duplicate image ids")
        seen = set()
        for a in self.annotations:
            if a.id in seen:
                problems.append(f"annotation {a.id}: duplicate id")
            seen.add(a.id)
            if a.image_id not in self._img:
                problems.append(f"annotation {a.id}: unknown image_id {a.image_id}")
            cat = self._cat.get(a.category_id)
            if cat is None:
                problems.append(f"annotation {a.id}: unknown category_id {a.category_id}")
            elif a.keypoints.shape != (cat.num_keypoints, 3):
                problems.append(f"annotation {a.id}: {a.keypoints.shape[0]} keypoints for category "
                                f"{cat.name!r} with {cat.num_keypoints}")
        return problems

    def check(self) -> "UniKPTDataset":
        problems = self.validate()
        if problems:
            raise LoadError(problems, self.name)
        return self

    def keypoint_universe(self) -> list[str]:
        seen: dict[str, None] = {}
        for c in self.categories:
            for k in c.keypoint_names:
                seen.setdefault(k)
        return list(seen)

    def stats(self) -> dict[str, int]:
        """Counts in the column order keypoints, classes, images, instances."""
        return {"keypoints": len(self.keypoint_universe()),
                "classes": len({c.name for c in self.categories}),
                "images": len(self.images), "instances": len(self.annotations)}

    def image_path(self, image: ImageRecord) -> Path:
        return (self.root or Path(".")) / image.file_name

    def load_pixels(self, image: ImageRecord) -> np.ndarray:
        from PIL import Image

        with Image.open(self.image_path(image)) as im:
            return np.asarray(im.convert("RGB"))

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": UNIFIED_FORMAT, "version": 1, "name": self.name, "orientation": self.orientation,
            "categories": [c.to_dict() for c in self.categories],
            "images": [{"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
                       for im in self.images],
            "annotations": [{"id": a.id, "image_id": a.image_id, "category_id": a.category_id,
                             "bbox": [a.box.cx, a.box.cy, a.box.w, a.box.h],
                             "keypoints": a.keypoints.reshape(-1).tolist()} for a in self.annotations],
        }

    def replace(self, **changes) -> "UniKPTDataset":
        return replace(self, **changes)


def _require(doc: dict, keys, source) -> None:
    missing = [k for k in keys if k not in doc]
    if missing:
        raise LoadError([f"missing section {k!r}" for k in missing], source)


def _category_from(c: dict, problems: list[str]) -> CategorySpec | None:
    names = c.get("keypoint_names", c.get("keypoints"))
    if "id" not in c or "name" not in c or names is None:
        problems.append(f"category {c.get('id', '?')}: needs id, name and keypoint names")
        return None
    skeleton = c.get("skeleton", [])
    if "keypoint_names" not in c:  # COCO skeletons are 1-based
        skeleton = [(a - 1, b - 1) for a, b in skeleton]
    try:
        return CategorySpec(int(c["id"]), str(c["name"]), [str(n) for n in names], c.get("swap_pairs"),
                            skeleton, c.get("taxonomy"))
    except LoadError as exc:
        problems.extend(exc.problems)
        return None


def dataset_from_dict(doc: dict[str, Any], source: str = "", root: Path | None = None) -> UniKPTDataset:
    """Parse a unified document or a COCO-convention one (absolute pixel
    ``bbox`` as x, y, w, h and flat pixel ``keypoints``)."""
    _require(doc, ("images", "annotations", "categories"), source)
    unified = doc.get("format") == UNIFIED_FORMAT
    problems: list[str] = []
    cats = [c for c in (_category_from(c, problems) for c in doc["categories"]) if c is not None]
    cat_by_id = {c.id: c for c in cats}
    images = []
    for im in doc["images"]:
        try:
            images.append(ImageRecord(int(im["id"]), str(im.get("file_name", "")), int(im["width"]),
                                      int(im["height"])))
        except (KeyError, TypeError, ValueError):
            problems.append(f"image {im.get('id', '?')}: needs id, width and height")
    img_by_id = {im.id: im for im in images}
    anns = []
    for a in doc["annotations"]:
        aid = a.get("id", "?")
        try:
            image = img_by_id.get(int(a["image_id"]))
            cat = cat_by_id.get(int(a["category_id"]))
        except (KeyError, TypeError, ValueError):
            problems.append(f"annotation {aid}: needs image_id and category_id")
            continue
        if image is None:
            problems.append(f"annotation {aid}: dangling image_id {a['image_id']}")
            continue
        if cat is None:
            problems.append(f"annotation {aid}: dangling category_id {a['category_id']}")
            continue
        kp = np.asarray(a.get("keypoints", []), dtype=np.float64)
        if kp.size != 3 * cat.num_keypoints:
            problems.append(f"annotation {aid}: keypoint array of length {kp.size} for category "
                            f"{cat.name!r} with {cat.num_keypoints} keypoints")
            continue
        kp = kp.reshape(-1, 3).copy()
        bbox = [float(v) for v in a.get("bbox", [])]
        if len(bbox) != 4:
            problems.append(f"annotation {aid}: bbox needs 4 numbers")
            continue
        W, H = float(image.width), float(image.height)
        if not unified:
            x, y, w, h = bbox
            bbox = [(x + w / 2) / W, (y + h / 2) / H, w / W, h / H]
            kp[:, 0] /= W
            kp[:, 1] /= H
        kp[:, 2] = visibility_from_raw(kp[:, 2]).astype(np.float64)
        if bbox[2] <= 0 or bbox[3] <= 0:
            problems.append(f"annotation {aid}: degenerate bbox")
            continue
        vis = kp[:, 2] > 0
        if np.any(kp[vis, :2] < 0) or np.any(kp[vis, :2] > 1):
            problems.append(f"annotation {aid}: visible keypoint outside the image")
            continue
        anns.append(Annotation(int(aid), image.id, cat.id, Box(*bbox), kp))
    ds = UniKPTDataset(cats, images, anns, str(doc.get("name", source)), str(doc.get("orientation", "image")),
                       root)
    problems += ds.validate()
    if problems:
        raise LoadError(problems, source)
    return ds


def load_coco_like(path) -> UniKPTDataset:
    """Load a COCO-convention or unified annotation document from ``path``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise LoadError([f"file not found: {path}"], str(path)) from exc
    except json.JSONDecodeError as exc:
        raise LoadError([f"not valid JSON: {exc}"], str(path)) from exc
    if not isinstance(doc, dict):
        raise LoadError(["top level must be an object"], str(path))
    return dataset_from_dict(doc, str(path), path.parent)


def to_coco_dict(ds: UniKPTDataset) -> dict[str, Any]:
    """Inverse of the COCO branch of :func:`dataset_from_dict`."""
    anns = []
    for a in ds.annotations:
        im = ds.image(a.image_id)
        x1, y1, x2, y2 = a.box.to_xyxy()
        kp = a.keypoints.copy()
        kp[:, 0] *= im.width
        kp[:, 1] *= im.height
        kp[:, 2] = np.where(kp[:, 2] > 0, 2, 0)
        anns.append({"id": a.id, "image_id": a.image_id, "category_id": a.category_id,
                     "bbox": [x1 * im.width, y1 * im.height, (x2 - x1) * im.width, (y2 - y1) * im.height],
                     "keypoints": kp.reshape(-1).tolist(), "num_keypoints": int((kp[:, 2] > 0).sum())})
    cats = []
    for c in ds.categories:
        d = {"id": c.id, "name": c.name, "keypoints": list(c.keypoint_names),
             "skeleton": [[a + 1, b + 1] for a, b in c.skeleton]}
        if c.swap_pairs is not None:
            d["swap_pairs"] = [list(p) for p in c.swap_pairs]
        cats.append(d)
    return {"images": [{"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
                       for im in ds.images], "annotations": anns, "categories": cats}


def dump_json(doc: Any) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"
