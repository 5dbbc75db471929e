"""Normalized box / keypoint primitives and the geometric quantities built on them.

Boxes live in normalized ``(cx, cy, w, h)``; keypoints in normalized ``(x, y)``
with a boolean visibility flag. Loaders convert pixel annotations on ingestion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import Tensor


class GeometryError(ValueError):
    """Raised for degenerate inputs (zero-area boxes, empty visibility, ...)."""


class SwapMapError(ValueError):
    """Raised when a left/right swap map is not an involutive permutation."""


# Per-keypoint constants published with the COCO keypoint benchmark, in the
# order nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles.
COCO_SIGMAS = (
    np.array([0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62, 0.62,
              1.07, 1.07, 0.87, 0.87, 0.89, 0.89]) / 10.0
)
COCO_KEYPOINT_NAMES = (
    "nose", "left eye", "right eye", "left ear", "right ear",
    "left shoulder", "right shoulder", "left elbow", "right elbow",
    "left wrist", "right wrist", "left hip", "right hip",
    "left knee", "right knee", "left ankle", "right ankle",
)
DEFAULT_SIGMA = 0.1


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"box must have positive size, got w={self.w}, h={self.h}")

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - 0.5 * self.w, self.cy - 0.5 * self.h,
                self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)

    def as_tensor(self, dtype=torch.float64) -> Tensor:
        return torch.tensor([self.cx, self.cy, self.w, self.h], dtype=dtype)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visible: bool

    def __post_init__(self):
        if self.visible and not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise GeometryError(f"visible keypoint outside the unit square: ({self.x}, {self.y})")


@dataclass(frozen=True)
class KeypointSet:
    points: tuple[Keypoint, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_array(cls, arr) -> "KeypointSet":
        """Build from a ``(K, 3)`` array of ``x, y, v`` with ``v`` already boolean-like."""
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, 3)
        return cls(tuple(Keypoint(float(x), float(y), bool(v > 0)) for x, y, v in arr))

    def to_array(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 3))
        return np.array([[p.x, p.y, float(p.visible)] for p in self.points])

    @property
    def visible(self) -> np.ndarray:
        return np.array([p.visible for p in self.points], dtype=bool)


def visibility_from_raw(flags) -> np.ndarray:
    """COCO-style flags 0/1/2 -> boolean visibility (1 and 2 both count as visible)."""
    return np.asarray(flags) > 0


def box_cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(boxes: Tensor) -> Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1], dim=-1)


def _check_boxes(boxes: Tensor) -> None:
    if boxes.numel() and bool((boxes[..., 2:] <= 0).any()):
        raise GeometryError("degenerate (zero-area) box")


def _giou_parts(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise GIoU for broadcast-compatible ``cxcywh`` tensors."""
    a_xyxy = box_cxcywh_to_xyxy(a)
    b_xyxy = box_cxcywh_to_xyxy(b)
    area_a = a[..., 2] * a[..., 3]
    area_b = b[..., 2] * b[..., 3]
    lt = torch.maximum(a_xyxy[..., :2], b_xyxy[..., :2])
    rb = torch.minimum(a_xyxy[..., 2:], b_xyxy[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou = inter / union
    lt_c = torch.minimum(a_xyxy[..., :2], b_xyxy[..., :2])
    rb_c = torch.maximum(a_xyxy[..., 2:], b_xyxy[..., 2:])
    wh_c = rb_c - lt_c
    enclosing = wh_c[..., 0] * wh_c[..., 1]
    return iou - (enclosing - union) / enclosing


def giou(a, b):
    """Generalized IoU of two boxes (or two equally shaped batches of boxes).

    Accepts :class:`Box` instances, in which case a float is returned, or
    ``(..., 4)`` cxcywh tensors, in which case the result is differentiable.
    """
    if isinstance(a, Box) and isinstance(b, Box):
        return float(_giou_parts(a.as_tensor(), b.as_tensor()))
    _check_boxes(a)
    _check_boxes(b)
    return _giou_parts(a, b)


def pairwise_giou(a: Tensor, b: Tensor) -> Tensor:
    """``(N, 4) x (M, 4) -> (N, M)`` GIoU matrix."""
    _check_boxes(a)
    _check_boxes(b)
    return _giou_parts(a[:, None, :], b[None, :, :])


def pairwise_iou(a: Tensor, b: Tensor) -> Tensor:
    a_xyxy = box_cxcywh_to_xyxy(a)[:, None]
    b_xyxy = box_cxcywh_to_xyxy(b)[None]
    lt = torch.maximum(a_xyxy[..., :2], b_xyxy[..., :2])
    rb = torch.minimum(a_xyxy[..., 2:], b_xyxy[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return inter / union


def oks(pred: Tensor, gt: Tensor, visible: Tensor, area, sigmas) -> Tensor:
    """Object keypoint similarity.

    Args:
        pred: ``(..., K, 2)`` predicted normalized coordinates.
        gt: ``(..., K, 2)`` ground-truth normalized coordinates.
        visible: ``(..., K)`` boolean ground-truth visibility.
        area: object area in normalized units, scalar or ``(...)``.
        sigmas: per-keypoint falloff constants, scalar or ``(K,)``.

    Returns:
        ``(...)`` similarity in ``[0, 1]``. Invisible ground-truth slots are
        masked out before the distance is even formed, so their coordinates
        never reach the result or its gradient.
    """
    visible = torch.as_tensor(visible, dtype=torch.bool)
    counts = visible.sum(-1)
    if bool((counts == 0).any()):
        raise GeometryError("oks needs at least one visible ground-truth keypoint")
    area = torch.as_tensor(area, dtype=pred.dtype)
    if bool((area <= 0).any()):
        raise GeometryError("oks needs a positive object area")
    sigmas = torch.as_tensor(sigmas, dtype=pred.dtype)
    zero = torch.zeros((), dtype=pred.dtype)
    diff = torch.where(visible[..., None], pred - gt, zero)
    d2 = (diff ** 2).sum(-1)
    e = torch.exp(-d2 / (2.0 * area[..., None] * sigmas ** 2))
    e = torch.where(visible, e, zero)
    return e.sum(-1) / counts.to(pred.dtype)


def fourier_embed(xy: Tensor, bands: int = 8, scale: float = 2 * math.pi) -> Tensor:
    """Map ``(..., 2)`` coordinates to ``(..., 4 * bands)`` sinusoids.

    Per band ``b`` the block is ``[sin(s 2^b x), cos(s 2^b x), sin(s 2^b y), cos(s 2^b y)]``.
    """
    if bands < 1:
        raise ValueError("bands must be >= 1")
    freqs = scale * (2.0 ** torch.arange(bands, dtype=xy.dtype, device=xy.device))
    x = xy[..., 0:1] * freqs
    y = xy[..., 1:2] * freqs
    out = torch.stack([x.sin(), x.cos(), y.sin(), y.cos()], dim=-1)
    return out.flatten(-2)


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = x.clamp(min=0, max=1)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))


def check_swap_map(swap_map: Sequence[int]) -> list[int]:
    perm = [int(i) for i in swap_map]
    n = len(perm)
    if sorted(perm) != list(range(n)):
        raise SwapMapError(f"swap map {perm} is not a permutation of 0..{n - 1}")
    for i, j in enumerate(perm):
        if perm[j] != i:
            raise SwapMapError(f"swap map {perm} is not an involution ({i}->{j}->{perm[j]})")
    return perm


def swap_map_from_pairs(num_keypoints: int, pairs: Sequence[Sequence[int]]) -> list[int]:
    perm = list(range(num_keypoints))
    for a, b in pairs:
        perm[a], perm[b] = b, a
    return check_swap_map(perm)


@dataclass
class AnnotatedImage:
    """An image with its instance annotations, all in normalized coordinates.

    ``keypoints[i]`` is a ``(K_i, 3)`` array of ``x, y, visible`` for the
    instance's category, so instances of different categories can coexist.
    """

    pixels: np.ndarray  # (H, W, 3) uint8
    boxes: np.ndarray  # (N, 4) cxcywh
    keypoints: list[np.ndarray]
    category_ids: list[int]

    def __eq__(self, other):
        if not isinstance(other, AnnotatedImage):
            return NotImplemented
        return (np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.boxes, other.boxes)
                and self.category_ids == other.category_ids
                and len(self.keypoints) == len(other.keypoints)
                and all(np.array_equal(a, b) for a, b in zip(self.keypoints, other.keypoints)))


def hflip(sample: AnnotatedImage, swap_map: Sequence[int] | Mapping[int, Sequence[int]]) -> AnnotatedImage:
    """Mirror an annotated image about its vertical axis.

    ``swap_map`` is either one permutation used for every instance or a
    mapping from category id to permutation.
    """
    if isinstance(swap_map, Mapping):
        perms = {int(k): check_swap_map(v) for k, v in swap_map.items()}
    else:
        perm = check_swap_map(swap_map)
        perms = {int(c): perm for c in sample.category_ids}

    boxes = sample.boxes.copy()
    if len(boxes):
        boxes[:, 0] = 1.0 - boxes[:, 0]
    keypoints = []
    for kpts, cat in zip(sample.keypoints, sample.category_ids):
        perm = perms[int(cat)]
        if len(perm) != len(kpts):
            raise SwapMapError(f"swap map of length {len(perm)} for {len(kpts)} keypoints")
        flipped = kpts.copy()
        flipped[:, 0] = 1.0 - flipped[:, 0]
        keypoints.append(flipped[perm])
    return AnnotatedImage(
        pixels=np.ascontiguousarray(sample.pixels[:, ::-1]),
        boxes=boxes,
        keypoints=keypoints,
        category_ids=list(sample.category_ids),
    )
