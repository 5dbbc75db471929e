"""Attention / feed-forward building blocks with post-norm residual wiring.

All blocks operate on unbatched ``(N, C)`` token matrices; callers loop over
images. Every block returns ``layer_norm(x + f(x))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class ConfigError(ValueError):
    """Invalid block / model configuration."""


@dataclass
class FeatureMap:
    """Tokenized multi-level image features.

    ``tokens`` is ``(T, C)``; ``positions`` ``(T, 2)`` holds each token's cell
    center in normalized image coordinates; ``level_shapes`` lists ``(h, w)``
    per pyramid level in token order.
    """

    tokens: Tensor
    positions: Tensor
    level_ids: Tensor
    level_shapes: list[tuple[int, int]]

    def __post_init__(self):
        total = sum(h * w for h, w in self.level_shapes)
        if self.tokens.shape[0] != total:
            raise ValueError(f"{self.tokens.shape[0]} tokens for level shapes {self.level_shapes}")

    def with_tokens(self, tokens: Tensor) -> "FeatureMap":
        return FeatureMap(tokens, self.positions, self.level_ids, self.level_shapes)

    @staticmethod
    def grid(level_shapes, tokens: Tensor) -> "FeatureMap":
        """Attach cell-center positions and level ids to row-major flattened levels."""
        pos, ids = [], []
        for lvl, (h, w) in enumerate(level_shapes):
            ys = (torch.arange(h, dtype=tokens.dtype) + 0.5) / h
            xs = (torch.arange(w, dtype=tokens.dtype) + 0.5) / w
            gy, gx = torch.meshgrid(ys, xs, indexing="ij")
            pos.append(torch.stack([gx, gy], -1).reshape(-1, 2))
            ids.append(torch.full((h * w,), lvl, dtype=torch.long))
        return FeatureMap(tokens, torch.cat(pos).to(tokens.device), torch.cat(ids).to(tokens.device),
                          list(level_shapes))


@dataclass
class TokenSequence:
    tokens: Tensor
    mask: Tensor | None = None  # True = valid

    @property
    def valid(self) -> Tensor:
        if self.mask is None:
            return torch.ones(self.tokens.shape[0], dtype=torch.bool, device=self.tokens.device)
        return self.mask


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention followed by residual add and LayerNorm.

    Positional embeddings, when given, are added to queries and keys only.
    ``key_mask`` marks valid keys; ``attn_mask`` (``N x M``, True = allowed)
    restricts individual query/key pairs. Queries with no admissible key get
    a zero attention output.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.last_weights: Tensor | None = None
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def attend(self, q, kv, q_pos=None, k_pos=None, key_mask=None, attn_mask=None):
        """Pre-residual attention output, ``(N, C)``."""
        n, m = q.shape[0], kv.shape[0]
        h, d = self.heads, self.dim // self.heads
        qq = self.q_proj(q if q_pos is None else q + q_pos).view(n, h, d).transpose(0, 1)
        kk = self.k_proj(kv if k_pos is None else kv + k_pos).view(m, h, d).transpose(0, 1)
        vv = self.v_proj(kv).view(m, h, d).transpose(0, 1)
        logits = qq @ kk.transpose(1, 2) / math.sqrt(d)
        allowed = torch.ones(n, m, dtype=torch.bool, device=q.device)
        if key_mask is not None:
            allowed = allowed & key_mask[None, :]
        if attn_mask is not None:
            allowed = allowed & attn_mask
        logits = logits.masked_fill(~allowed, float("-inf"))
        any_key = allowed.any(-1, keepdim=True)
        logits = torch.where(any_key, logits, torch.zeros_like(logits))
        weights = torch.softmax(logits, dim=-1)
        weights = torch.where(allowed, weights, torch.zeros_like(weights))
        self.last_weights = weights.detach()
        out = (weights @ vv).transpose(0, 1).reshape(n, self.dim)
        return self.out_proj(out)

    def forward(self, q, kv, q_pos=None, k_pos=None, key_mask=None, attn_mask=None, skip=False):
        if skip:
            return self.norm(q)
        return self.norm(q + self.attend(q, kv, q_pos, k_pos, key_mask, attn_mask))


def mha(block: MultiHeadAttention, q: TokenSequence, kv: TokenSequence) -> TokenSequence:
    return TokenSequence(block(q.tokens, kv.tokens, key_mask=kv.mask), q.mask)


class FFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(x + self.fc2(F.relu(self.fc1(x))))


def bilinear_sample(values: Tensor, shape: tuple[int, int], locs: Tensor) -> Tensor:
    """Sample a flattened ``(h*w, D)`` level at normalized ``(..., 2)`` locations.

    Cell centers sit at ``(j + 0.5) / w``; locations outside the unit square
    read zeros (with bilinear falloff at the border).
    """
    h, w = shape
    img = values.t().reshape(1, -1, h, w)
    grid = (2.0 * locs - 1.0).reshape(1, 1, -1, 2)
    out = F.grid_sample(img, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.reshape(values.shape[1], -1).t().reshape(*locs.shape[:-1], values.shape[1])


class DeformableAttention(nn.Module):
    """Deformable attention over a small multi-level pyramid.

    Each query predicts, per head and level, ``points`` sampling offsets and
    attention logits; the logits are softmax-normalized jointly over levels
    and points of a head. Offsets are expressed in units of the level's cell
    size, or, when 4-d reference boxes are given, in units of half the box
    size divided by ``points``.
    """

    def __init__(self, dim: int, heads: int = 8, levels: int = 3, points: int = 4):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        if points < 1:
            raise ConfigError("points must be >= 1")
        self.dim, self.heads, self.levels, self.points = dim, heads, levels, points
        self.sampling_offsets = nn.Linear(dim, heads * levels * points * 2)
        self.attention_weights = nn.Linear(dim, heads * levels * points)
        self.value_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.zeros_(self.sampling_offsets.weight)
        thetas = torch.arange(self.heads, dtype=torch.float32) * (2.0 * math.pi / self.heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(self.heads, 1, 1, 2).repeat(1, self.levels, self.points, 1)
        for i in range(self.points):
            grid[:, :, i, :] *= i + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.flatten())
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        for lin in (self.value_proj, self.out_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def attend(self, queries: Tensor, ref: Tensor, fmap: FeatureMap, q_pos: Tensor | None = None) -> Tensor:
        n = queries.shape[0]
        h, lv, p = self.heads, self.levels, self.points
        d = self.dim // h
        if len(fmap.level_shapes) != lv:
            raise ConfigError(f"expected {lv} levels, feature map has {len(fmap.level_shapes)}")
        q = queries if q_pos is None else queries + q_pos
        offsets = self.sampling_offsets(q).view(n, h, lv, p, 2)
        weights = self.attention_weights(q).view(n, h, lv * p).softmax(-1).view(n, h, lv, p)
        value = self.value_proj(fmap.tokens)
        out = queries.new_zeros(n, h, d)
        start = 0
        for lvl, (lh, lw) in enumerate(fmap.level_shapes):
            level_vals = value[start:start + lh * lw]  # (hw, C)
            start += lh * lw
            if ref.shape[-1] == 2:
                norm = torch.tensor([lw, lh], dtype=q.dtype, device=q.device)
                locs = ref[:, None, None, :2] + offsets[:, :, lvl] / norm
            else:
                locs = ref[:, None, None, :2] + offsets[:, :, lvl] / p * ref[:, None, None, 2:] * 0.5
            # heads act as the grid_sample batch: each samples its own channel slice
            img = level_vals.view(lh, lw, h, d).permute(2, 3, 0, 1)
            grid = 2.0 * locs.permute(1, 0, 2, 3) - 1.0  # (h, n, p, 2)
            sampled = F.grid_sample(img, grid, mode="bilinear", padding_mode="zeros",
                                    align_corners=False)  # (h, d, n, p)
            sampled = sampled.permute(2, 0, 3, 1)  # (n, h, p, d)
            out = out + (weights[:, :, lvl, :, None] * sampled).sum(2)
        return self.out_proj(out.reshape(n, self.dim))

    def forward(self, queries, ref, fmap, q_pos=None):
        return self.norm(queries + self.attend(queries, ref, fmap, q_pos))


def scale_residual_branches(module: nn.Module, gain: float) -> None:
    """Scale the last projection of every attention / FFN branch in ``module``.

    Stacked post-norm layers whose branches start at full scale tend to map
    all prompt rows onto nearly the same direction; a small gain keeps each
    block close to ``layer_norm(x)`` at initialization.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (MultiHeadAttention, DeformableAttention)):
                m.out_proj.weight.mul_(gain)
            elif isinstance(m, FFN):
                m.fc2.weight.mul_(gain)


def deformable_attn(block: DeformableAttention, queries: TokenSequence, ref_points: Tensor,
                    fmap: FeatureMap) -> TokenSequence:
    return TokenSequence(block(queries.tokens, ref_points, fmap), queries.mask)


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x

    def zero_output(self):
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)
