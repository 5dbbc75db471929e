"""Textual and visual prompt encoders producing :class:`PromptFeatures`."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .blocks import FFN, MultiHeadAttention
from .geometry import fourier_embed


class PromptError(ValueError):
    """Malformed prompt (empty names, duplicate keypoints, out-of-range keypoints)."""


PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"
RESERVED = (PAD, UNK, EOS)
TEMPLATE_WORDS = ("a", "an", "photo", "of", "the")


def render_template(style: str, object_name: str, part: str | None = None,
                    keypoint: str | None = None) -> str:
    """Render ``"An {style} photo of a {object/part/keypoint}"``.

    Keypoints and parts are joined to their object as
    ``"<keypoint> of the <part> <object>"``; an empty style collapses the
    prefix to ``"A photo of a ..."``.

    >>> render_template("oil painting", "person")
    'An oil painting photo of a person'
    >>> render_template("natural", "cat", keypoint="left eye")
    'An natural photo of a left eye of the cat'
    """
    if not object_name or not object_name.strip():
        raise PromptError("object name must be non-empty")
    prefix = f"An {style} photo of a" if style else "A photo of a"
    if keypoint:
        owner = f"{part} {object_name}" if part else object_name
        return f"{prefix} {keypoint} of the {owner}"
    if part:
        return f"{prefix} {part} of the {object_name}"
    return f"{prefix} {object_name}"


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokenize(text)] + [self.stoi[EOS]]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        words = set(TEMPLATE_WORDS)
        for text in texts:
            words.update(tokenize(text))
        return cls(sorted(words))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
        return cls(t for t in lines if t and t not in RESERVED)


@dataclass
class ClassPrompt:
    name: str
    keypoints: list[str]
    parts: dict[str, str] = field(default_factory=dict)  # keypoint name -> part name

    def __post_init__(self):
        if not self.name:
            raise PromptError("class name must be non-empty")
        if len(set(self.keypoints)) != len(self.keypoints):
            raise PromptError(f"duplicate keypoint names in class {self.name!r}")
        if not self.keypoints:
            raise PromptError(f"class {self.name!r} has no keypoints")


@dataclass
class TextPrompt:
    style: str
    classes: list[ClassPrompt]

    def __post_init__(self):
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise PromptError("class names must be unique")

    @classmethod
    def parse(cls, spec: str, style: str = "") -> "TextPrompt":
        """Parse ``"person: left eye, right eye; cat: nose"``."""
        classes = []
        for chunk in spec.split(";"):
            if not chunk.strip():
                continue
            if ":" not in chunk:
                raise PromptError(f"expected 'class: kpt, kpt' in {chunk!r}")
            name, kpts = chunk.split(":", 1)
            classes.append(ClassPrompt(name.strip(), [k.strip() for k in kpts.split(",") if k.strip()]))
        if not classes:
            raise PromptError("empty prompt")
        return cls(style, classes)


@dataclass
class VisualPrompt:
    """One exemplar: ``image`` is ``(3, R, R)`` float in [0, 1] already cropped
    to the object; ``keypoints`` is ``(K, 3)`` of ``x, y, visible`` relative
    to that crop."""

    image: Tensor
    keypoints: np.ndarray
    keypoint_names: list[str]
    object_name: str

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        if len(kp) != len(self.keypoint_names):
            raise PromptError(f"{len(kp)} keypoints for {len(self.keypoint_names)} names")
        vis = kp[:, 2] > 0
        xy = kp[vis, :2]
        if len(xy) and (np.any(xy < 0) or np.any(xy > 1)):
            raise PromptError("visible visual-prompt keypoint outside [0, 1]^2")
        self.keypoints = kp


@dataclass
class PromptFeatures:
    """Object rows ``obj`` (L x C), keypoint rows ``kpt`` (K_total x C) and the
    per-class ``slices`` into ``kpt``."""

    obj: Tensor
    kpt: Tensor
    slices: list[tuple[int, int]]
    class_names: list[str]
    keypoint_names: list[list[str]]

    def __post_init__(self):
        if len(self.slices) != self.obj.shape[0]:
            raise PromptError("one keypoint slice per class required")
        cursor = 0
        for a, b in self.slices:
            if a != cursor or b <= a:
                raise PromptError(f"slices {self.slices} do not partition the keypoint rows")
            cursor = b
        if cursor != self.kpt.shape[0]:
            raise PromptError(f"slices cover {cursor} of {self.kpt.shape[0]} keypoint rows")

    @property
    def num_classes(self) -> int:
        return self.obj.shape[0]

    def rows(self) -> Tensor:
        return torch.cat([self.obj, self.kpt], 0)

    def with_rows(self, rows: Tensor) -> "PromptFeatures":
        L = self.num_classes
        return PromptFeatures(rows[:L], rows[L:], self.slices, self.class_names, self.keypoint_names)

    def class_of_row(self) -> Tensor:
        """Class index owning each keypoint row."""
        out = torch.empty(self.kpt.shape[0], dtype=torch.long)
        for c, (a, b) in enumerate(self.slices):
            out[a:b] = c
        return out

    @staticmethod
    def concat(parts: Sequence["PromptFeatures"]) -> "PromptFeatures":
        if not parts:
            raise PromptError("no prompts to concatenate")
        slices, cursor = [], 0
        for p in parts:
            for a, b in p.slices:
                slices.append((cursor + a, cursor + b))
            cursor += p.kpt.shape[0]
        return PromptFeatures(
            torch.cat([p.obj for p in parts]), torch.cat([p.kpt for p in parts]), slices,
            [n for p in parts for n in p.class_names],
            [k for p in parts for k in p.keypoint_names],
        )


class TransformerLayer(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.ffn = FFN(dim, hidden)

    def forward(self, x, pos=None, key_mask=None, attn_mask=None):
        return self.ffn(self.attn(x, x, pos, pos, key_mask=key_mask, attn_mask=attn_mask))


class TextEncoder(nn.Module):
    """Small text tower: token + position embeddings, a few transformer
    layers, end-of-sequence pooling and a linear projection to the model
    dimension.

    ``keypoint_context`` controls how keypoint rows are rendered: ``"name"``
    renders the keypoint alone as the template subject, so one unified
    keypoint name maps to one row whatever class uses it; ``"object"`` uses
    the hierarchical ``"<kpt> of the <part> <object>"`` form.
    """

    def __init__(self, vocab: Vocabulary, dim: int = 256, layers: int = 2, heads: int = 8,
                 max_len: int = 32, keypoint_context: str = "name"):
        super().__init__()
        if keypoint_context not in ("name", "object"):
            raise ValueError(f"unknown keypoint_context {keypoint_context!r}")
        self.vocab = vocab
        self.max_len = max_len
        self.keypoint_context = keypoint_context
        self.token_embed = nn.Embedding(len(vocab), dim)
        self.pos_embed = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        nn.init.normal_(self.token_embed.weight, std=0.5)
        self.layers = nn.ModuleList(TransformerLayer(dim, heads, 4 * dim) for _ in range(layers))
        self.proj = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)

    def encode_strings(self, texts: Sequence[str]) -> Tensor:
        """``(len(texts), C)``; identical strings give identical rows."""
        unique = list(dict.fromkeys(texts))
        # unique strings run as one flat sequence with block-diagonal attention
        ids, pos, seg, last = [], [], [], []
        for s, text in enumerate(unique):
            tok = self.vocab.encode(text)[-self.max_len:]
            ids += tok
            pos += range(len(tok))
            seg += [s] * len(tok)
            last.append(len(ids) - 1)
        dev = self.pos_embed.device
        seg_t = torch.tensor(seg, device=dev)
        mask = seg_t[:, None] == seg_t[None, :]
        x = self.token_embed(torch.tensor(ids, device=dev)) + self.pos_embed[torch.tensor(pos, device=dev)]
        for layer in self.layers:
            x = layer(x, attn_mask=mask)
        rows = self.norm(self.proj(x[torch.tensor(last, device=dev)]))
        index = {t: i for i, t in enumerate(unique)}
        return rows[torch.tensor([index[t] for t in texts], device=dev)]

    def render(self, prompt: TextPrompt) -> tuple[list[str], list[str]]:
        obj_texts = [render_template(prompt.style, c.name) for c in prompt.classes]
        kpt_texts = []
        for c in prompt.classes:
            for k in c.keypoints:
                if self.keypoint_context == "object":
                    kpt_texts.append(render_template(prompt.style, c.name, c.parts.get(k), k))
                else:
                    kpt_texts.append(render_template(prompt.style, k))
        return obj_texts, kpt_texts

    def forward(self, prompt: TextPrompt) -> PromptFeatures:
        if not prompt.classes:
            raise PromptError("text prompt needs at least one class")
        obj_texts, kpt_texts = self.render(prompt)
        rows = self.encode_strings(obj_texts + kpt_texts)
        L = len(obj_texts)
        slices, cursor = [], 0
        for c in prompt.classes:
            slices.append((cursor, cursor + len(c.keypoints)))
            cursor += len(c.keypoints)
        return PromptFeatures(rows[:L], rows[L:], slices, [c.name for c in prompt.classes],
                              [list(c.keypoints) for c in prompt.classes])


def encode_text(encoder: TextEncoder, prompt: TextPrompt) -> PromptFeatures:
    return encoder(prompt)


# per-channel statistics used by CLIP-style image towers
PIXEL_MEAN = (0.481, 0.458, 0.408)
PIXEL_STD = (0.269, 0.261, 0.276)


class VisualPromptEncoder(nn.Module):
    """ViT-style patch encoder extended with keypoint tokens.

    Visible keypoints start from a projected Fourier embedding of their crop
    coordinates, invisible ones from a single shared learnable mask token.
    Every block refines patches with self-attention, then keypoint tokens
    with keypoint-to-keypoint self-attention and patch-to-keypoint
    cross-attention.
    """

    def __init__(self, dim: int = 256, layers: int = 4, heads: int = 8, patch: int = 16,
                 resolution: int = 224, bands: int = 8, scale: float = 2 * math.pi):
        super().__init__()
        if resolution % patch:
            raise ValueError(f"prompt resolution {resolution} not divisible by patch {patch}")
        self.resolution, self.patch = resolution, patch
        self.bands, self.scale = bands, scale
        self.grid = resolution // patch
        self.patch_embed = nn.Conv2d(3, dim, patch, stride=patch)
        self.patch_pos = nn.Parameter(torch.randn(self.grid * self.grid, dim) * 0.02)
        self.kpt_embed = nn.Linear(4 * bands, dim)
        self.mask_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.patch_layers = nn.ModuleList(TransformerLayer(dim, heads, 4 * dim) for _ in range(layers))
        self.k2k = nn.ModuleList(MultiHeadAttention(dim, heads) for _ in range(layers))
        self.p2k = nn.ModuleList(MultiHeadAttention(dim, heads) for _ in range(layers))
        self.kpt_ffn = nn.ModuleList(FFN(dim, 4 * dim) for _ in range(layers))
        self.obj_norm = nn.LayerNorm(dim)
        self.register_buffer("pixel_mean", torch.tensor(PIXEL_MEAN).view(3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(PIXEL_STD).view(3, 1, 1), persistent=False)

    def initial_tokens(self, keypoints) -> Tensor:
        kp = torch.as_tensor(np.asarray(keypoints), dtype=self.mask_token.dtype,
                             device=self.mask_token.device)
        vis = kp[:, 2] > 0
        # invisible coordinates are zeroed before embedding so they are never read
        xy = torch.where(vis[:, None], kp[:, :2], torch.zeros_like(kp[:, :2]))
        emb = self.kpt_embed(fourier_embed(xy, self.bands, self.scale))
        return torch.where(vis[:, None], emb, self.mask_token.expand_as(emb))

    def forward(self, prompt: VisualPrompt) -> PromptFeatures:
        img = prompt.image.to(self.mask_token)
        if img.shape[-2:] != (self.resolution, self.resolution):
            raise PromptError(f"prompt image must be {self.resolution}x{self.resolution}, "
                              f"got {tuple(img.shape[-2:])}")
        img = (img - self.pixel_mean) / self.pixel_std
        patches = self.patch_embed(img[None])[0].flatten(1).t() + self.patch_pos
        kpts = self.initial_tokens(prompt.keypoints)
        for layer, k2k, p2k, ffn in zip(self.patch_layers, self.k2k, self.p2k, self.kpt_ffn):
            patches = layer(patches)
            kpts = k2k(kpts, kpts)
            kpts = p2k(kpts, patches, k_pos=self.patch_pos)
            kpts = ffn(kpts)
        obj = self.obj_norm(patches.mean(0, keepdim=True))
        return PromptFeatures(obj, kpts, [(0, kpts.shape[0])], [prompt.object_name],
                              [list(prompt.keypoint_names)])


def encode_visual(encoder: VisualPromptEncoder, prompt: VisualPrompt) -> PromptFeatures:
    return encoder(prompt)


def crop_exemplar(image: Tensor, box_cxcywh, keypoints: np.ndarray, resolution: int,
                  margin: float = 0.1) -> tuple[Tensor, np.ndarray]:
    """Square crop around a normalized box (``margin`` padding per side
    fraction of the longer side) resized to ``resolution``.

    ``image`` is ``(3, H, W)``; pixels outside the source read zero. Returns
    the crop and keypoints re-expressed in crop coordinates (visibility kept;
    keypoints falling outside the crop become invisible).
    """
    _, H, W = image.shape
    cx, cy, w, h = (float(v) for v in box_cxcywh)
    side = max(w * W, h * H) * (1.0 + 2 * margin)
    x0 = cx * W - side / 2
    y0 = cy * H - side / 2
    # affine grid in source normalized [-1, 1] coordinates
    lin = (torch.arange(resolution, dtype=image.dtype) + 0.5) / resolution
    gx = (x0 + lin * side) / W * 2 - 1
    gy = (y0 + lin * side) / H * 2 - 1
    yy, xx = torch.meshgrid(gy, gx, indexing="ij")
    grid = torch.stack([xx, yy], -1)[None]
    crop = F.grid_sample(image[None], grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]
    kp = np.asarray(keypoints, dtype=np.float64).copy()
    kp[:, 0] = (kp[:, 0] * W - x0) / side
    kp[:, 1] = (kp[:, 1] * H - y0) / side
    inside = (kp[:, :2] >= 0).all(1) & (kp[:, :2] <= 1).all(1)
    kp[:, 2] = np.where((kp[:, 2] > 0) & inside, 1.0, 0.0)
    return crop, kp
