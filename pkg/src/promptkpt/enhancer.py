"""Cross-modality feature enhancer: mutually refine image tokens and prompt rows."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .blocks import FFN, ConfigError, DeformableAttention, FeatureMap, MultiHeadAttention
from .prompts import PromptFeatures


@dataclass
class EnhancedPair:
    fmap: FeatureMap
    prompts: PromptFeatures


def class_block_mask(prompts: PromptFeatures) -> Tensor:
    """``(L+K, L+K)`` mask letting each row attend only within its own class."""
    L = prompts.num_classes
    owner = torch.cat([torch.arange(L), prompts.class_of_row()])
    return owner[:, None] == owner[None, :]


class EnhancerLayer(nn.Module):
    """One enhancer layer.

    Sub-block order: deformable self-attention on image tokens, vanilla
    self-attention over the joint obj+kpt prompt sequence, image-to-prompt
    cross-attention (prompt rows query the image), prompt-to-image
    cross-attention (image tokens query the prompts). Each sub-block is
    followed by its own FFN.
    """

    def __init__(self, dim: int, heads: int, levels: int, points: int, hidden: int,
                 deformable: bool = True):
        super().__init__()
        self.deformable = deformable
        self.image_self = (DeformableAttention(dim, heads, levels, points) if deformable
                           else MultiHeadAttention(dim, heads))
        self.image_ffn = FFN(dim, hidden)
        self.prompt_self = MultiHeadAttention(dim, heads)
        self.prompt_ffn = FFN(dim, hidden)
        self.image_to_prompt = MultiHeadAttention(dim, heads)
        self.i2p_ffn = FFN(dim, hidden)
        self.prompt_to_image = MultiHeadAttention(dim, heads)
        self.p2i_ffn = FFN(dim, hidden)

    def cross_attention_blocks(self):
        return (self.image_to_prompt, self.prompt_to_image)

    def forward(self, img: Tensor, rows: Tensor, fmap: FeatureMap, pos: Tensor,
                prompt_mask: Tensor | None = None, cross: bool = True):
        if self.deformable:
            img = self.image_self(img, fmap.positions, fmap.with_tokens(img), q_pos=pos)
        else:
            img = self.image_self(img, img, pos, pos)
        img = self.image_ffn(img)
        rows = self.prompt_ffn(self.prompt_self(rows, rows, attn_mask=prompt_mask))
        rows = self.i2p_ffn(self.image_to_prompt(rows, img, k_pos=pos, skip=not cross))
        img = self.p2i_ffn(self.prompt_to_image(img, rows, q_pos=pos, skip=not cross))
        return img, rows


class CrossModalityEnhancer(nn.Module):
    def __init__(self, dim: int = 256, heads: int = 8, layers: int = 6, levels: int = 3,
                 points: int = 4, hidden: int = 1024, deformable: bool = True,
                 class_mask: bool = False):
        super().__init__()
        if layers < 1:
            raise ConfigError("enhancer needs at least one layer")
        self.class_mask = class_mask
        self.layers = nn.ModuleList(
            EnhancerLayer(dim, heads, levels, points, hidden, deformable) for _ in range(layers)
        )

    def forward(self, fmap: FeatureMap, prompts: PromptFeatures, pos: Tensor,
                cross: bool = True) -> EnhancedPair:
        """``pos`` is the image tokens' positional embedding. ``cross=False``
        removes both cross-attention operators (their residual/norm/FFN
        wiring stays) and serves as the ablation reference."""
        if fmap.tokens.shape[1] != prompts.obj.shape[1]:
            raise ConfigError("image and prompt feature dimensions differ")
        img, rows = fmap.tokens, prompts.rows()
        mask = class_block_mask(prompts).to(img.device) if self.class_mask else None
        for layer in self.layers:
            img, rows = layer(img, rows, fmap, pos, mask, cross)
        return EnhancedPair(fmap.with_tokens(img), prompts.with_rows(rows))


def enhance(enhancer: CrossModalityEnhancer, fmap: FeatureMap, prompts: PromptFeatures,
            pos: Tensor) -> EnhancedPair:
    return enhancer(fmap, prompts, pos)
