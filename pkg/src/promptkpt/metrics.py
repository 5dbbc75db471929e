"""Keypoint metrics: PCK, COCO-style OKS average precision, alignment score."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .geometry import DEFAULT_SIGMA, oks, pairwise_iou

OKS_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class MetricError(ValueError):
    pass


@dataclass
class GroundTruth:
    image_id: int
    category: int | str
    box: np.ndarray  # (4,) normalized cxcywh
    keypoints: np.ndarray  # (K, 3) normalized x, y, visible


@dataclass
class Prediction:
    image_id: int
    category: int | str
    score: float
    box: np.ndarray  # (4,) normalized cxcywh
    keypoints: np.ndarray  # (K, 2) normalized


@dataclass
class EvalReport:
    pck: float
    ap: float
    ap_per_threshold: list[float]
    align_obj: float | None = None
    align_kpt: float | None = None

    @property
    def ap50(self) -> float:
        return self.ap_per_threshold[0]

    @property
    def ap75(self) -> float:
        return self.ap_per_threshold[5]

    def to_dict(self) -> dict:
        return {"pck": self.pck, "ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
                "ap_per_threshold": list(self.ap_per_threshold),
                "align_obj": self.align_obj, "align_kpt": self.align_kpt}


def _by_image(items):
    out = defaultdict(list)
    for it in items:
        out[it.image_id].append(it)
    return out


def greedy_iou_match(preds: Sequence[Prediction], gts: Sequence[GroundTruth], iou_thr: float = 0.5):
    """Score-ordered greedy matching of one image's predictions to same-class
    ground truths by box IoU; returns ``{gt index: prediction}``."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    if not preds or not gts:
        return {}
    ious = pairwise_iou(torch.tensor(np.array([p.box for p in preds]), dtype=torch.float64),
                        torch.tensor(np.array([g.box for g in gts]), dtype=torch.float64)).numpy()
    taken: dict[int, Prediction] = {}
    for i in order:
        best, best_iou = None, iou_thr
        for j, g in enumerate(gts):
            if j in taken or g.category != preds[i].category:
                continue
            if ious[i, j] >= best_iou:
                best, best_iou = j, ious[i, j]
        if best is not None:
            taken[best] = preds[i]
    return taken


def evaluate_pck(preds: Sequence[Prediction], gts: Sequence[GroundTruth], threshold: float = 0.2,
                 iou_thr: float = 0.5) -> float:
    """Fraction of visible ground-truth keypoints predicted within
    ``threshold * max(box_w, box_h)``; unmatched ground truths score zero."""
    total = sum(int((g.keypoints[:, 2] > 0).sum()) for g in gts)
    if total == 0:
        raise MetricError("no visible ground-truth keypoints")
    pred_img = _by_image(preds)
    correct = 0
    for image_id, img_gts in _by_image(gts).items():
        matched = greedy_iou_match(pred_img.get(image_id, []), img_gts, iou_thr)
        for j, p in matched.items():
            g = img_gts[j]
            tol = threshold * max(g.box[2], g.box[3])
            for (x, y, v), (px, py) in zip(g.keypoints, p.keypoints):
                if v > 0 and math.hypot(px - x, py - y) <= tol:
                    correct += 1
    return correct / total


def _image_oks(dets: Sequence[Prediction], gts: Sequence[GroundTruth], sigma) -> np.ndarray:
    out = np.zeros((len(dets), len(gts)))
    for j, g in enumerate(gts):
        vis = torch.tensor(g.keypoints[:, 2] > 0)
        area = float(g.box[2] * g.box[3])
        gt_xy = torch.tensor(g.keypoints[:, :2], dtype=torch.float64)
        for i, d in enumerate(dets):
            if len(d.keypoints) != len(g.keypoints):
                continue
            out[i, j] = float(oks(torch.tensor(np.asarray(d.keypoints), dtype=torch.float64), gt_xy, vis, area,
                                  sigma))
    return out


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP of a score-sorted true-positive sequence."""
    if n_gt == 0:
        raise MetricError("no ground truths")
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(1 - tp)
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(q.mean())


def evaluate_ap(preds: Sequence[Prediction], gts: Sequence[GroundTruth], sigma=DEFAULT_SIGMA,
                thresholds=OKS_THRESHOLDS, per_threshold: bool = False):
    """COCO-style keypoint AP averaged over categories and OKS thresholds.

    Detections are sorted by score (stable); each is greedily matched to the
    unmatched same-class ground truth of highest OKS at or above the
    threshold. Ground truths without visible keypoints are ignored.
    """
    gts = [g for g in gts if (g.keypoints[:, 2] > 0).any()]
    if not preds or not gts:
        return (0.0, [0.0] * len(thresholds)) if per_threshold else 0.0
    cats = sorted({g.category for g in gts}, key=str)
    results = np.zeros((len(thresholds), len(cats)))
    for c_i, cat in enumerate(cats):
        c_gts = _by_image([g for g in gts if g.category == cat])
        c_preds = [p for p in preds if p.category == cat]
        order = sorted(range(len(c_preds)), key=lambda i: -c_preds[i].score)
        c_preds = [c_preds[i] for i in order]
        n_gt = sum(len(v) for v in c_gts.values())
        per_img = _by_image(c_preds)
        sims = {im: _image_oks(per_img[im], c_gts.get(im, []), sigma) for im in per_img}
        for t_i, thr in enumerate(thresholds):
            taken = {im: set() for im in per_img}
            seen = defaultdict(int)
            tp = np.zeros(len(c_preds))
            for k, p in enumerate(c_preds):
                i = seen[p.image_id]
                seen[p.image_id] += 1
                s = sims[p.image_id]
                best, best_s = -1, min(thr, 1 - 1e-10)
                for j in range(s.shape[1]):
                    if j in taken[p.image_id]:
                        continue
                    if s[i, j] >= best_s:
                        best, best_s = j, s[i, j]
                if best >= 0:
                    taken[p.image_id].add(best)
                    tp[k] = 1
            results[t_i, c_i] = interpolated_ap(tp, n_gt)
    per_thr = results.mean(1).tolist()
    ap = float(np.mean(per_thr))
    return (ap, per_thr) if per_threshold else ap


def rescaled_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``(cos(a_i, b_i) + 1) / 2`` row-wise."""
    return (torch.nn.functional.cosine_similarity(a, b, dim=-1) + 1) / 2
