"""Hungarian set matching, focal alignment loss and the four-term training loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .config import LossConfig
from .geometry import oks, pairwise_giou, giou

EPS = 1e-8


class MatchError(ValueError):
    pass


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_preds: list[int]

    @property
    def pred_index(self) -> list[int]:
        return [p for p, _ in self.pairs]

    @property
    def gt_index(self) -> list[int]:
        return [g for _, g in self.pairs]


def hungarian(cost) -> MatchResult:
    """Minimum-cost assignment of every ground truth (column) to a distinct prediction (row)."""
    cost = np.asarray(cost.detach().cpu() if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchError("cost must be a matrix")
    n_pred, n_gt = cost.shape
    if n_pred < n_gt:
        raise MatchError(f"{n_pred} predictions cannot cover {n_gt} ground truths")
    if not np.isfinite(cost).all():
        raise MatchError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda pc: pc[1])
    matched = set(rows.tolist())
    return MatchResult(pairs, [i for i in range(n_pred) if i not in matched])


class CostWeights(NamedTuple):
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    kpt: float = 5.0

    @classmethod
    def from_config(cls, cfg: LossConfig) -> "CostWeights":
        return cls(cfg.w_cls, cfg.w_l1, cfg.w_giou, cfg.w_kpt_l1)


@dataclass
class Targets:
    """Ground truth of one image: ``boxes`` (M, 4) cxcywh, ``classes`` (M,)
    prompt-class indices, ``keypoints`` M arrays of (K_c, 3) x, y, visible."""

    boxes: Tensor
    classes: Tensor
    keypoints: list[Tensor] = field(default_factory=list)

    def __len__(self):
        return int(self.boxes.shape[0])


def _kpt_cost(pred_kpts, gt_kpts) -> Tensor:
    """Mean visible-slot L1 between each prediction's and each gt's keypoints.
    Pairs whose keypoint counts differ (different classes) cost 2, the
    largest L1 two normalized points can have."""
    n, m = len(pred_kpts), len(gt_kpts)
    out = torch.zeros(n, m, dtype=torch.float64)
    for j, gt in enumerate(gt_kpts):
        gt = torch.as_tensor(gt, dtype=torch.float64)
        vis = gt[:, 2] > 0
        for i, p in enumerate(pred_kpts):
            p = torch.as_tensor(p, dtype=torch.float64).detach()
            if p.shape[0] != gt.shape[0]:
                out[i, j] = 2.0
            elif vis.any():
                out[i, j] = (p[vis] - gt[vis, :2]).abs().sum(-1).mean()
    return out


def match_cost(logits: Tensor, boxes: Tensor, gts: Targets, weights: CostWeights = CostWeights(),
               keypoints: Sequence[Tensor] | None = None) -> Tensor:
    """``(N, M)`` matching cost; the keypoint term is skipped when ``keypoints`` is None."""
    if any(w < 0 for w in weights):
        raise MatchError("cost weights must be nonnegative")
    n, m = boxes.shape[0], len(gts)
    with torch.no_grad():
        prob = logits.detach().sigmoid()
        cost = torch.zeros(n, m, dtype=boxes.dtype)
        if m == 0:
            return cost
        if weights.cls:
            cost = cost - weights.cls * prob[:, gts.classes.long()]
        if weights.l1:
            cost = cost + weights.l1 * torch.cdist(boxes.detach(), gts.boxes.to(boxes.dtype), p=1)
        if weights.giou:
            cost = cost + weights.giou * (1 - pairwise_giou(boxes.detach(), gts.boxes.to(boxes.dtype)))
        if weights.kpt and keypoints is not None:
            cost = cost + weights.kpt * _kpt_cost(keypoints, gts.keypoints).to(boxes.dtype)
    return cost


def focal_loss(p, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise focal loss on probabilities, clamped to ``[eps, 1 - eps]``."""
    p = torch.as_tensor(p)
    p = p.clamp(EPS, 1 - EPS)
    target = torch.as_tensor(target, dtype=p.dtype)
    pos = -alpha * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * p ** gamma * torch.log(1 - p)
    return target * pos + (1 - target) * neg


def sigmoid_focal_loss(logits: Tensor, target: Tensor, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Same as :func:`focal_loss` on ``sigmoid(logits)``, computed stably."""
    target = target.to(logits.dtype)
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p_t = p * target + (1 - p) * (1 - target)
    alpha_t = alpha * target + (1 - alpha) * (1 - target)
    return alpha_t * ce * (1 - p_t) ** gamma


@dataclass
class LossBreakdown:
    reg_obj: Tensor
    reg_kpt: Tensor
    align_obj: Tensor
    align_kpt: Tensor
    total: Tensor
    matches: list[MatchResult] = field(default_factory=list, repr=False, compare=False)
    info: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_terms(cls, reg_obj, reg_kpt, align_obj, align_kpt, weights=(1.0, 1.0, 1.0, 1.0),
                   matches=None) -> "LossBreakdown":
        terms = [torch.as_tensor(t, dtype=torch.get_default_dtype()) if not isinstance(t, Tensor) else t
                 for t in (reg_obj, reg_kpt, align_obj, align_kpt)]
        total = sum(w * t for w, t in zip(weights, terms))
        return cls(*terms, total, matches or [])

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("reg_obj", "reg_kpt", "align_obj", "align_kpt", "total")}


@dataclass
class SetPrediction:
    """Per-layer decoder outputs of one image.

    Object lists are indexed by object-decoder layer, keypoint lists by
    keypoint-decoder layer. ``kpt_owner`` / ``kpt_row`` give each keypoint
    query's object-query index and identity row in the keypoint prompt rows.
    """

    obj_logits: list[Tensor]
    boxes: list[Tensor]
    kpt_points: list[Tensor] = field(default_factory=list)
    kpt_logits: list[Tensor] = field(default_factory=list)
    kpt_owner: Tensor | None = None
    kpt_row: Tensor | None = None
    kpt_slot: Tensor | None = None


def _positive_rows(rows: Tensor, names: Sequence[str] | None, n_cols: int) -> Tensor:
    """Target matrix for keypoint alignment: a query is positive for its
    identity row and for any row carrying the same keypoint name."""
    target = torch.zeros(rows.shape[0], n_cols)
    if names is None:
        target[torch.arange(rows.shape[0]), rows] = 1.0
        return target
    names = list(names)
    same = torch.tensor([[a == b for b in names] for a in names], dtype=torch.float32)
    return same[rows]


def total_loss(pred: SetPrediction, gts: Targets, cfg: LossConfig = LossConfig(),
               matches: Sequence[MatchResult] | None = None, keypoint_names: Sequence[str] | None = None,
               slices: Sequence[tuple[int, int]] | None = None) -> LossBreakdown:
    """Four-term set-prediction loss with deep supervision.

    Object terms are matched per object-decoder layer (or use ``matches``
    when given, which freezes the assignment). Keypoint groups are tied to
    object queries, so keypoint terms use the last object layer's match.
    """
    n_obj = len(pred.boxes)
    if n_obj == 0:
        raise MatchError("no decoder-layer predictions")
    weights = CostWeights.from_config(cfg)
    dtype = pred.boxes[0].dtype
    zero = pred.boxes[0].sum() * 0
    m = len(gts)
    norm = max(m, 1)
    gt_boxes = gts.boxes.to(dtype)
    used: list[MatchResult] = []
    reg_obj = zero
    align_obj = zero
    for layer in range(n_obj):
        logits, boxes = pred.obj_logits[layer], pred.boxes[layer]
        if matches is not None:
            match = matches[min(layer, len(matches) - 1)]
        else:
            match = hungarian(match_cost(logits, boxes, gts, weights))
        used.append(match)
        target = torch.zeros_like(logits)
        if m:
            pi, gi = match.pred_index, match.gt_index
            target[pi, gts.classes[gi].long()] = 1.0
            src = boxes[pi]
            tgt = gt_boxes[gi]
            l1 = (src - tgt).abs().sum() / norm
            g = (1 - giou(src, tgt)).sum() / norm
            reg_obj = reg_obj + cfg.w_l1 * l1 + cfg.w_giou * g
        focal = sigmoid_focal_loss(logits, target, cfg.alpha, cfg.gamma).sum() / norm
        align_obj = align_obj + cfg.w_cls * focal
    reg_obj = reg_obj / n_obj
    align_obj = align_obj / n_obj

    reg_kpt = zero
    align_kpt = zero
    n_kpt = len(pred.kpt_points)
    if n_kpt and pred.kpt_owner is not None and pred.kpt_owner.numel():
        final = used[-1]
        owner_to_gt = {p: g for p, g in final.pairs}
        owner = pred.kpt_owner.tolist()
        groups: dict[int, list[int]] = {}
        for q, o in enumerate(owner):
            if o in owner_to_gt:
                groups.setdefault(o, []).append(q)
        n_groups = max(len(set(owner)), 1)
        rows = pred.kpt_row.long()
        for layer in range(n_kpt):
            points, logits = pred.kpt_points[layer], pred.kpt_logits[layer]
            target = _positive_rows(rows, keypoint_names, logits.shape[1]).to(logits.dtype)
            focal = sigmoid_focal_loss(logits, target, cfg.alpha, cfg.gamma)
            if cfg.kpt_align_scope == "slice" and slices is not None:
                keep = torch.zeros_like(focal)
                for q, r in enumerate(rows.tolist()):
                    a, b = next((a, b) for a, b in slices if a <= r < b)
                    keep[q, a:b] = 1.0
                focal = focal * keep
            align_kpt = align_kpt + cfg.w_cls * focal.sum() / n_groups
            l1_sum, oks_sum, n_vis, n_oks = zero, zero, 0, 0
            for o, qs in groups.items():
                j = owner_to_gt[o]
                gt = gts.keypoints[j].to(dtype)
                slots = pred.kpt_slot[qs].long() if pred.kpt_slot is not None else torch.arange(len(qs))
                gt = gt[slots]
                vis = gt[:, 2] > 0
                if not bool(vis.any()):
                    continue
                p = points[qs]
                diff = torch.where(vis[:, None], p - gt[:, :2], torch.zeros((), dtype=dtype))
                l1_sum = l1_sum + diff.abs().sum()
                n_vis += int(vis.sum())
                area = gt_boxes[j, 2] * gt_boxes[j, 3]
                oks_sum = oks_sum + (1 - oks(p, gt[:, :2], vis, area, cfg.sigma))
                n_oks += 1
            if n_vis:
                reg_kpt = reg_kpt + cfg.w_kpt_l1 * l1_sum / n_vis
            if n_oks:
                reg_kpt = reg_kpt + cfg.w_oks * oks_sum / n_oks
        reg_kpt = reg_kpt / n_kpt
        align_kpt = align_kpt / n_kpt
    return LossBreakdown.from_terms(reg_obj, reg_kpt, align_obj, align_kpt, matches=used)
