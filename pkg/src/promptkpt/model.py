"""Full promptable keypoint detector assembled from the component modules."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .blocks import FeatureMap, scale_residual_branches
from .config import ModelConfig
from .decoders import (ContrastiveHead, KeypointDecoder, KeypointQuerySet, ObjectDecoder,
                       ObjectQuerySet, PositionEmbedding, QuerySelector)
from .enhancer import CrossModalityEnhancer, EnhancedPair
from .prompts import (PromptError, PromptFeatures, TextEncoder, TextPrompt, VisualPrompt,
                      VisualPromptEncoder, Vocabulary)


def _conv(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(8, cout), nn.ReLU())


class Backbone(nn.Module):
    """Small strided CNN producing ``levels`` feature maps from stride 8 down."""

    def __init__(self, dim: int, levels: int = 3, width: int = 32):
        super().__init__()
        self.stem = nn.Sequential(_conv(3, width, 2), _conv(width, width, 1),
                                  _conv(width, 2 * width, 2), _conv(2 * width, 2 * width, 1))
        chans = [2 * width, 4 * width] + [4 * width] * levels
        self.stages = nn.ModuleList(_conv(chans[i], chans[i + 1], 2) for i in range(levels))
        self.proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(chans[i + 1], dim, 1), nn.GroupNorm(8, dim)) for i in range(levels)
        )

    def forward(self, image: Tensor) -> list[Tensor]:
        x = self.stem(image[None])
        outs = []
        for stage, proj in zip(self.stages, self.proj):
            x = stage(x)
            outs.append(proj(x)[0])
        return outs


@dataclass
class ObjectOutput:
    enhanced: EnhancedPair
    queries: ObjectQuerySet
    layer_logits: list[Tensor]  # per decoder layer, (N_q, L)

    @property
    def boxes(self) -> Tensor:
        return self.queries.layer_boxes[-1]

    @property
    def logits(self) -> Tensor:
        return self.layer_logits[-1]


@dataclass
class KeypointOutput:
    queries: KeypointQuerySet
    layer_logits: list[Tensor] = field(default_factory=list)  # (G*K, K_total)

    @property
    def points(self) -> Tensor:
        return self.queries.layer_points[-1]


class PromptPoseModel(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        C = cfg.dim
        self.backbone = Backbone(C, cfg.levels)
        self.level_embed = nn.Parameter(torch.randn(cfg.levels, C) * 0.02)
        self.image_pos = PositionEmbedding(C, 2, cfg.fourier_bands)
        self.text_encoder = TextEncoder(vocab, C, cfg.text_layers, cfg.heads, cfg.text_max_len,
                                        cfg.keypoint_context)
        self.visual_encoder = VisualPromptEncoder(C, cfg.vit_layers, cfg.heads, cfg.patch_size,
                                                  cfg.prompt_resolution, cfg.fourier_bands,
                                                  cfg.fourier_scale)
        self.enhancer = CrossModalityEnhancer(C, cfg.heads, cfg.enhancer_layers, cfg.levels, cfg.points,
                                              cfg.ffn_hidden, cfg.deformable, cfg.prompt_class_mask)
        self.selector = QuerySelector(C)
        self.object_decoder = ObjectDecoder(C, cfg.heads, cfg.object_decoder_layers, cfg.levels,
                                            cfg.points, cfg.ffn_hidden, cfg.fourier_bands)
        self.keypoint_decoder = KeypointDecoder(C, cfg.heads, cfg.keypoint_decoder_layers, cfg.levels,
                                                cfg.points, cfg.ffn_hidden, cfg.fourier_bands)
        self.obj_head = ContrastiveHead(C)
        self.kpt_head = ContrastiveHead(C)
        for part in (self.visual_encoder, self.enhancer, self.object_decoder, self.keypoint_decoder):
            scale_residual_branches(part, cfg.residual_init_gain)

    @property
    def vocab(self) -> Vocabulary:
        return self.text_encoder.vocab

    def encode_prompts(self, prompt: TextPrompt | Sequence[VisualPrompt]) -> PromptFeatures:
        if isinstance(prompt, TextPrompt):
            if not prompt.classes:
                raise PromptError("empty prompt set")
            return self.text_encoder(prompt)
        prompt = list(prompt)
        if not prompt:
            raise PromptError("empty prompt set")
        return PromptFeatures.concat([self.visual_encoder(p) for p in prompt])

    def image_features(self, image: Tensor) -> tuple[FeatureMap, Tensor]:
        """``image`` is ``(3, H, W)`` float in [0, 1]."""
        levels = self.backbone(image - 0.5)
        shapes = [tuple(l.shape[-2:]) for l in levels]
        tokens = torch.cat([l.flatten(1).t() for l in levels])
        fmap = FeatureMap.grid(shapes, tokens)
        pos = self.image_pos(fmap.positions) + self.level_embed[fmap.level_ids]
        return fmap, pos

    def detect_objects(self, image: Tensor, prompts: PromptFeatures) -> ObjectOutput:
        fmap, pos = self.image_features(image)
        enhanced = self.enhancer(fmap, prompts, pos)
        n = min(self.cfg.num_queries, enhanced.fmap.tokens.shape[0])
        queries = self.object_decoder(self.selector(enhanced, n), enhanced)
        logits = [self.obj_head(x, enhanced.prompts.obj) for x in queries.layer_embeddings]
        return ObjectOutput(enhanced, queries, logits)

    def detect_keypoints(self, objects: ObjectOutput, owners, classes) -> KeypointOutput:
        kq = self.keypoint_decoder(objects.queries, objects.enhanced, owners, classes)
        rows = objects.enhanced.prompts.kpt
        logits = [self.kpt_head(x, rows) for x in kq.layer_embeddings]
        return KeypointOutput(kq, logits)

    def forward(self, image: Tensor, prompts: PromptFeatures, owners=None):
        """Inference-style pass: keypoint groups for ``owners`` (default: all
        queries), each sliced with its argmax class."""
        objects = self.detect_objects(image, prompts)
        if owners is None:
            owners = list(range(objects.logits.shape[0]))
        classes = objects.logits.argmax(-1)[torch.as_tensor(owners, dtype=torch.long)].tolist() if len(owners) else []
        return objects, self.detect_keypoints(objects, owners, classes)


def image_to_tensor(pixels: np.ndarray) -> Tensor:
    """``(H, W, 3)`` uint8 -> ``(3, H, W)`` float32 in [0, 1]."""
    return torch.from_numpy(np.array(pixels, dtype=np.uint8)).permute(2, 0, 1).float() / 255.0


def resize_image(image: Tensor, size: int) -> Tensor:
    if tuple(image.shape[-2:]) == (size, size):
        return image
    return F.interpolate(image[None], size=(size, size), mode="bilinear", align_corners=False)[0]
