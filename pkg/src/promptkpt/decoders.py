"""Prompt-guided query selection and the decoupled object / keypoint decoders."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .blocks import FFN, MLP, ConfigError, DeformableAttention, FeatureMap, MultiHeadAttention
from .enhancer import EnhancedPair
from .geometry import fourier_embed, inverse_sigmoid
from .prompts import PromptError


def classify(queries: Tensor, rows: Tensor, temperature, bias=0.0) -> Tensor:
    """Contrastive logits ``<q_i, p_j> / temperature + bias``."""
    temperature = torch.as_tensor(temperature, dtype=queries.dtype)
    if bool((temperature <= 0).any()):
        raise ValueError("temperature must be positive")
    return queries @ rows.t() / temperature + bias


class ContrastiveHead(nn.Module):
    """Learnable temperature (stored as log) and scalar bias around :func:`classify`.

    The temperature starts at ``sqrt(C)``, i.e. logits start as
    ``<q, p> / sqrt(C)``; the bias starts at the focal-loss prior for a 1%
    positive rate.
    """

    def __init__(self, dim: int, prior: float = 0.01):
        super().__init__()
        self.log_temperature = nn.Parameter(torch.tensor(0.5 * math.log(dim)))
        self.bias = nn.Parameter(torch.tensor(-math.log((1 - prior) / prior)))

    @property
    def temperature(self) -> Tensor:
        return self.log_temperature.exp()

    def forward(self, queries: Tensor, rows: Tensor) -> Tensor:
        return classify(queries, rows, self.temperature, self.bias)


class PositionEmbedding(nn.Module):
    """Fourier features of 2-d points or 4-d boxes, mapped to ``dim`` by an MLP."""

    def __init__(self, dim: int, coords: int, bands: int = 8):
        super().__init__()
        self.bands = bands
        self.mlp = MLP(2 * coords * bands, dim, dim, 2)

    def forward(self, x: Tensor) -> Tensor:
        feats = [fourier_embed(x[..., i:i + 2], self.bands, math.pi) for i in range(0, x.shape[-1], 2)]
        return self.mlp(torch.cat(feats, -1))


@dataclass
class ObjectQuerySet:
    embeddings: Tensor  # (N_q, C)
    ref_boxes: Tensor  # (N_q, 4) cxcywh
    token_index: Tensor | None = None
    layer_boxes: list[Tensor] = field(default_factory=list)
    layer_embeddings: list[Tensor] = field(default_factory=list)


@dataclass
class KeypointQuerySet:
    embeddings: Tensor  # (G*K, C) flattened over groups
    ref_points: Tensor  # (G*K, 2)
    owner: Tensor  # (G*K,) object-query index
    group: Tensor  # (G*K,) group position 0..G-1
    slot: Tensor  # (G*K,) keypoint index inside the owner's class
    row: Tensor  # (G*K,) global keypoint-row index (identity row)
    classes: list[int]
    layer_points: list[Tensor] = field(default_factory=list)
    layer_embeddings: list[Tensor] = field(default_factory=list)


class QuerySelector(nn.Module):
    """Top-n image tokens by max dot product with the object prompt rows.

    Reference boxes are anchored at the token's cell center with a
    level-dependent base size, then offset in logit space by a small box
    head (zero-initialized, so the first references sit on the anchors).
    """

    def __init__(self, dim: int, base_size: float = 0.05):
        super().__init__()
        self.base_size = base_size
        self.box_head = MLP(dim, dim, 4, 2)
        self.box_head.zero_output()

    @staticmethod
    def scores(e: EnhancedPair) -> Tensor:
        return (e.fmap.tokens @ e.prompts.obj.t()).max(-1).values

    def forward(self, e: EnhancedPair, n: int) -> ObjectQuerySet:
        T = e.fmap.tokens.shape[0]
        if n > T:
            raise ConfigError(f"cannot select {n} queries from {T} tokens")
        order = select_top(self.scores(e), n)
        emb = e.fmap.tokens[order]
        wh = self.base_size * (2.0 ** e.fmap.level_ids[order].to(emb.dtype))
        anchors = torch.cat([e.fmap.positions[order], torch.stack([wh, wh], -1)], -1)
        boxes = (inverse_sigmoid(anchors) + self.box_head(emb)).sigmoid()
        return ObjectQuerySet(emb, boxes, order)


def select_top(scores: Tensor, n: int) -> Tensor:
    """Indices of the ``n`` highest scores, descending; ties keep index order."""
    return torch.sort(scores.detach(), descending=True, stable=True).indices[:n]


class DecoderLayer(nn.Module):
    """self-attn -> deformable image cross-attn -> prompt cross-attn -> FFN."""

    def __init__(self, dim, heads, levels, points, hidden):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.image_attn = DeformableAttention(dim, heads, levels, points)
        self.prompt_attn = MultiHeadAttention(dim, heads)
        self.ffn = FFN(dim, hidden)

    def forward(self, q, pos, ref, fmap: FeatureMap, rows, attn_mask=None, cross: bool = True):
        q = self.self_attn(q, q, pos, pos, attn_mask=attn_mask)
        q = self.image_attn(q, ref, fmap, q_pos=pos) if cross else self.image_attn.norm(q)
        q = self.prompt_attn(q, rows, skip=not cross)
        return self.ffn(q)


def _refine(ref: Tensor, delta: Tensor) -> Tensor:
    return (inverse_sigmoid(ref) + delta).clamp(-12.0, 12.0).sigmoid()


class ObjectDecoder(nn.Module):
    def __init__(self, dim, heads, layers, levels, points, hidden, bands=8):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(dim, heads, levels, points, hidden) for _ in range(layers))
        self.box_heads = nn.ModuleList(MLP(dim, dim, 4, 3) for _ in range(layers))
        for head in self.box_heads:
            head.zero_output()
        self.pos = PositionEmbedding(dim, 4, bands)

    def forward(self, q: ObjectQuerySet, e: EnhancedPair) -> ObjectQuerySet:
        x, ref = q.embeddings, q.ref_boxes
        rows = e.prompts.rows()
        boxes, embs = [], []
        for layer, head in zip(self.layers, self.box_heads):
            ref_in = ref.detach()
            x = layer(x, self.pos(ref_in), ref_in, e.fmap, rows)
            # the selected references stay attached so the selection box head learns
            new = _refine(ref, head(x))
            boxes.append(new)
            embs.append(x)
            ref = new.detach()
        return ObjectQuerySet(x, ref, q.token_index, boxes, embs)


class KeypointDecoder(nn.Module):
    def __init__(self, dim, heads, layers, levels, points, hidden, bands=8):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(dim, heads, levels, points, hidden) for _ in range(layers))
        self.point_heads = nn.ModuleList(MLP(dim, dim, 2, 3) for _ in range(layers))
        for head in self.point_heads:
            head.zero_output()
        self.pos = PositionEmbedding(dim, 2, bands)

    def init_queries(self, objects: ObjectQuerySet, e: EnhancedPair, owners, class_of) -> KeypointQuerySet:
        slices = e.prompts.slices
        emb, ref, owner, group, slot, row = [], [], [], [], [], []
        for g, (i, c) in enumerate(zip(owners, class_of)):
            i, c = int(i), int(c)
            if not 0 <= c < len(slices):
                raise PromptError(f"class index {c} has no keypoint slice")
            a, b = slices[c]
            if b <= a:
                raise PromptError(f"class {c} has an empty keypoint slice")
            k = b - a
            emb.append(e.prompts.kpt[a:b] + objects.embeddings[i])
            ref.append(objects.ref_boxes[i, :2].detach().expand(k, 2))
            owner += [i] * k
            group += [g] * k
            slot += list(range(k))
            row += list(range(a, b))
        dev = e.fmap.tokens.device
        if not emb:
            C = e.fmap.tokens.shape[1]
            empty = torch.zeros(0, dtype=torch.long, device=dev)
            return KeypointQuerySet(e.fmap.tokens.new_zeros(0, C), e.fmap.tokens.new_zeros(0, 2),
                                    empty, empty, empty, empty, [])
        as_long = lambda v: torch.tensor(v, dtype=torch.long, device=dev)  # noqa: E731
        return KeypointQuerySet(torch.cat(emb), torch.cat(ref), as_long(owner), as_long(group),
                                as_long(slot), as_long(row), [int(c) for c in class_of])

    def forward(self, objects: ObjectQuerySet, e: EnhancedPair, owners, class_of,
                cross: bool = True) -> KeypointQuerySet:
        kq = self.init_queries(objects, e, owners, class_of)
        if kq.embeddings.shape[0] == 0:
            kq.layer_points = [kq.ref_points for _ in self.layers]
            kq.layer_embeddings = [kq.embeddings for _ in self.layers]
            return kq
        rows = e.prompts.rows()
        mask = kq.group[:, None] == kq.group[None, :]
        owner_wh = objects.ref_boxes[kq.owner, 2:].detach()
        x, ref = kq.embeddings, kq.ref_points
        for layer, head in zip(self.layers, self.point_heads):
            ref_in = ref.detach()
            x = layer(x, self.pos(ref_in), torch.cat([ref_in, owner_wh], -1), e.fmap, rows,
                      attn_mask=mask, cross=cross)
            new = _refine(ref_in, head(x))
            kq.layer_points.append(new)
            kq.layer_embeddings.append(x)
            ref = new
        kq.embeddings, kq.ref_points = x, ref
        return kq
