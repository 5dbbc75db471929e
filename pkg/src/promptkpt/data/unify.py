"""Merging several keypoint datasets into one unified dataset."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .schema import Annotation, CategorySpec, ImageRecord, LoadError, UniKPTDataset

log = logging.getLogger(__name__)


class UnifyError(ValueError):
    pass


@dataclass
class RenameMap:
    """``(dataset name, source keypoint name) -> unified keypoint name``."""

    pairs: dict[tuple[str, str], str] = field(default_factory=dict)

    def __call__(self, dataset: str, name: str) -> str:
        return self.pairs.get((dataset, name), self.pairs.get(("*", name), name))

    @classmethod
    def from_entries(cls, entries: Sequence[tuple[str, str, str]]) -> "RenameMap":
        pairs: dict[tuple[str, str], str] = {}
        for dataset, src, dst in entries:
            key = (str(dataset), str(src))
            if key in pairs and pairs[key] != dst:
                raise UnifyError(f"conflicting renames for {src!r} in {dataset!r}: "
                                 f"{pairs[key]!r} vs {dst!r}")
            pairs[key] = str(dst)
        return cls(pairs)

    @classmethod
    def from_document(cls, doc: Any) -> "RenameMap":
        """Accepts ``[{"dataset", "source", "target"}, ...]`` or
        ``{dataset: {source: target}}`` (``"*"`` matches any dataset)."""
        entries = []
        if isinstance(doc, list):
            for e in doc:
                try:
                    entries.append((e["dataset"], e["source"], e["target"]))
                except (KeyError, TypeError) as exc:
                    raise UnifyError(f"rename entry {e!r} needs dataset, source and target") from exc
        elif isinstance(doc, dict):
            for dataset, mapping in doc.items():
                if isinstance(mapping, list):  # duplicate-preserving [[src, dst], ...]
                    entries += [(dataset, s, t) for s, t in mapping]
                elif isinstance(mapping, dict):
                    entries += [(dataset, s, t) for s, t in mapping.items()]
                else:
                    raise UnifyError(f"rename map for {dataset!r} must be an object")
        else:
            raise UnifyError("rename map must be a list or an object")
        return cls.from_entries(entries)

    @classmethod
    def load(cls, path) -> "RenameMap":
        def pairs_hook(items):
            keys = [k for k, _ in items]
            dup = {k for k in keys if keys.count(k) > 1}
            conflicts = [k for k in dup if len({json.dumps(v) for kk, v in items if kk == k}) > 1]
            if conflicts:
                raise UnifyError(f"conflicting renames for {sorted(conflicts)!r} in {path}")
            return dict(items)

        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"), object_pairs_hook=pairs_hook)
        except FileNotFoundError as exc:
            raise UnifyError(f"rename map not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UnifyError(f"rename map {path} is not valid JSON: {exc}") from exc
        return cls.from_document(doc)


def standardize_orientation(ds: UniKPTDataset) -> UniKPTDataset:
    """Rewrite a viewer-frame dataset into the image-frame left/right convention.

    Every annotation of a dataset flagged ``orientation == "viewer"`` has its
    left/right slots exchanged through the category's swap pairs, and the
    result is flagged ``"image"``; an image-frame dataset is returned as is,
    which makes the operation idempotent.
    """
    if ds.orientation == "image":
        return ds
    if ds.orientation != "viewer":
        raise UnifyError(f"unknown orientation flag {ds.orientation!r}")
    maps = {}
    for c in ds.categories:
        if c.swap_pairs is None:
            raise UnifyError(f"category {c.name!r} declares no swap_pairs; cannot standardize orientation")
        maps[c.id] = c.swap_map()
    anns = [Annotation(a.id, a.image_id, a.category_id, a.box, a.keypoints[maps[a.category_id]])
            for a in ds.annotations]
    return UniKPTDataset(ds.categories, ds.images, anns, ds.name, "image", ds.root)


def _renamed_category(cat: CategorySpec, dataset: str, renames: RenameMap) -> CategorySpec:
    names = [renames(dataset, k) for k in cat.keypoint_names]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise UnifyError(f"renaming {dataset!r}/{cat.name!r} produces duplicate keypoint names {dup}")
    return CategorySpec(cat.id, cat.name, names, cat.swap_pairs, cat.skeleton, cat.taxonomy)


def unify(datasets: Sequence[UniKPTDataset], renames: RenameMap | None = None,
          name: str = "unified") -> tuple[UniKPTDataset, dict[str, Any]]:
    """Merge datasets under one keypoint vocabulary.

    Keypoint names are rewritten through ``renames``. Categories sharing a
    name and the same set of keypoint names are merged; the first one seen
    fixes the slot order and later annotations are permuted into it.
    Viewer-frame inputs are standardized first. Images with the same file
    name are kept once, and annotations identical after remapping are
    dropped. Ids are renumbered from 1 in input order.

    Returns the dataset and a statistics report with one row per source plus
    the unified row.
    """
    renames = renames or RenameMap()
    cats: list[CategorySpec] = []
    cat_key: dict[tuple[str, frozenset], CategorySpec] = {}
    images: list[ImageRecord] = []
    image_by_file: dict[str, int] = {}
    anns: list[Annotation] = []
    ann_keys: set = set()
    rows = []
    roots = {ds.root for ds in datasets}
    for ds in datasets:
        ds = standardize_orientation(ds)
        rows.append({"dataset": ds.name, **ds.stats()})
        cat_map: dict[int, tuple[int, np.ndarray]] = {}
        for c in ds.categories:
            c = _renamed_category(c, ds.name, renames)
            key = (c.name, frozenset(c.keypoint_names))
            target = cat_key.get(key)
            if target is None:
                target = CategorySpec(len(cats) + 1, c.name, list(c.keypoint_names), c.swap_pairs,
                                      c.skeleton, c.taxonomy)
                cats.append(target)
                cat_key[key] = target
            order = np.array([c.keypoint_names.index(k) for k in target.keypoint_names], dtype=int)
            cat_map[c.id] = (target.id, order)
        img_map = {}
        for im in ds.images:
            file_key = str(ds.image_path(im)) if len(roots) > 1 else im.file_name
            if im.file_name and file_key in image_by_file:
                img_map[im.id] = image_by_file[file_key]
                continue
            new = ImageRecord(len(images) + 1, im.file_name if len(roots) == 1 else file_key,
                              im.width, im.height)
            images.append(new)
            img_map[im.id] = new.id
            if im.file_name:
                image_by_file[file_key] = new.id
        for a in ds.annotations:
            cid, order = cat_map[a.category_id]
            kp = a.keypoints[order]
            key = (img_map[a.image_id], cid, a.box, kp.tobytes())
            if key in ann_keys:
                continue
            ann_keys.add(key)
            anns.append(Annotation(len(anns) + 1, img_map[a.image_id], cid, a.box, kp))
    root = next(iter(roots)) if len(roots) == 1 else None
    out = UniKPTDataset(cats, images, anns, name, "image", root)
    problems = out.validate()
    if problems:
        raise LoadError(problems, name)
    report = {"sources": rows, "unified": {"dataset": name, **out.stats()}}
    log.info("unified %d datasets: %s", len(datasets), report["unified"])
    return out, report


def sample_subset(ds: UniKPTDataset, n: int, seed: int) -> UniKPTDataset:
    """Seeded uniform sample of ``n`` images (kept in original order) and their annotations."""
    if not 0 <= n <= len(ds.images):
        raise UnifyError(f"cannot sample {n} of {len(ds.images)} images")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(ds.images), size=n, replace=False))
    images = [ds.images[i] for i in keep]
    ids = {im.id for im in images}
    anns = [a for a in ds.annotations if a.image_id in ids]
    return UniKPTDataset(ds.categories, images, anns, ds.name, ds.orientation, ds.root)
