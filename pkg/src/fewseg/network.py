"""Multi-way encoder/decoder: fuse query scales with class prototypes and
decode (N+1)-way logits plus the pixel-embedding tap.

The default fusion adds each prototype into every query scale and
concatenates the per-class combined features; the three ablation variants
substitute concat(+projection) for the add and/or summation for the concat.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import (ResidualBlock, ScaleAttention, SupportRelationAttention,
                        class_prototype, combine_scales, init_conv_relu)
from .errors import ConfigError
from .features import build_backbone, extract_features, masked_global_pool, multiscale_query

FUSION_MODES = ("A+C", "C+C", "A+A", "C+A")


@dataclass
class SegPrediction:
    """Logits at feature resolution, probabilities at query resolution, and
    the embedding map tapped before the decoder's residual block."""

    logits: torch.Tensor
    probs: torch.Tensor
    pml_embedding: torch.Tensor

    @property
    def pred_labels(self):
        """Episode-local labels at query resolution."""
        return self.probs.argmax(dim=0)

    @property
    def pred_labels_featres(self):
        """Episode-local labels at feature resolution (the embedding grid)."""
        return self.logits.argmax(dim=0)


class Decoder(nn.Module):
    """1x1 conv to C (tap point), residual block, 1x1 conv to N+1 logits."""

    def __init__(self, in_channels, channels, n_way):
        super().__init__()
        self.n_way = n_way
        self.conv_in = nn.Conv2d(in_channels, channels, 1)
        self.res = ResidualBlock(channels)
        self.conv_out = nn.Conv2d(channels, n_way + 1, 1)
        init_conv_relu(self.conv_in)
        # zero-init classifier: training starts from uniform class probabilities
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, emb):
        tap = self.conv_in(emb)
        return self.conv_out(self.res(tap)), tap


class MultiwaySegModel(nn.Module):
    """End-to-end episodic segmenter.

    Holds one backbone, one relation-attention module, one scale-attention
    module shared by all class branches, and per-N decoder heads (the first
    decoder conv depends on the episode arity and fusion mode).
    """

    def __init__(self, backbone_cfg, channels=256, n_way=2, num_scales=4,
                 fusion_mode="A+C", use_support_attention=True,
                 use_scale_attention=True, relation_groups=4):
        super().__init__()
        if fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if not use_scale_attention and num_scales != 1:
            raise ConfigError("disabling scale attention requires num_scales == 1")
        self.channels = channels
        self.num_scales = num_scales
        self.fusion_mode = fusion_mode
        self.use_support_attention = use_support_attention
        self.use_scale_attention = use_scale_attention

        self.backbone = build_backbone(backbone_cfg)
        self.relation = SupportRelationAttention(channels, relation_groups)
        self.scale_attn = ScaleAttention(channels)
        if fusion_mode[0] == "C":
            self.fuse_proj = nn.Conv2d(2 * channels, channels, 1)
            init_conv_relu(self.fuse_proj)
        else:
            self.fuse_proj = None
        self.decoders = nn.ModuleDict({
            str(n_way): Decoder(self.embedding_channels(n_way), channels, n_way)
        })

    def embedding_channels(self, n_way):
        return n_way * self.channels if self.fusion_mode[2] == "C" else self.channels

    def decoder_for(self, n_way):
        key = str(n_way)
        if key not in self.decoders:
            raise ConfigError(
                f"no decoder head for {n_way}-way episodes "
                f"(heads available: {sorted(self.decoders)})"
            )
        return self.decoders[key]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    # ---- pipeline stages -------------------------------------------------

    def support_prototypes(self, support_images, support_masks):
        """(N, K, 3, H, W) images and (N, K, H, W) masks -> (N, C) prototypes."""
        n, k = support_images.shape[:2]
        flat = support_images.reshape(n * k, *support_images.shape[2:])
        feats = extract_features(flat, self.backbone)
        feats = feats.reshape(n, k, *feats.shape[1:])
        protos = []
        for i in range(n):
            pooled = torch.stack([
                masked_global_pool(feats[i, j], support_masks[i, j]) for j in range(k)
            ])
            protos.append(class_prototype(pooled, self.relation, self.use_support_attention))
        return torch.stack(protos)

    def fuse_scale(self, query_scale, prototype):
        """Merge one query scale with one class prototype."""
        broadcast = prototype.reshape(-1, 1, 1).expand(-1, *query_scale.shape[-2:])
        if self.fusion_mode[0] == "A":
            return query_scale + broadcast
        stacked = torch.cat([query_scale, broadcast], dim=0)
        return self.fuse_proj(stacked.unsqueeze(0)).squeeze(0)

    def encode(self, query_scales, prototypes):
        """Per-class fused multi-scale features combined and merged across classes."""
        if len(query_scales) != self.num_scales:
            raise ConfigError(
                f"expected {self.num_scales} query scales, got {len(query_scales)}"
            )
        for s in query_scales:
            if s.shape[0] != self.channels:
                raise ConfigError("query scale channel count does not match model")
        if prototypes.shape[-1] != self.channels:
            raise ConfigError("prototype channel count does not match model")
        size = query_scales[0].shape[-2:]
        per_class = []
        for proto in prototypes:
            fused = [self.fuse_scale(scale, proto) for scale in query_scales]
            if self.use_scale_attention:
                branches = [self.scale_attn(x) for x in fused]
                per_class.append(combine_scales(branches, size=size))
            else:
                _, transformed = self.scale_attn(fused[0])
                per_class.append(transformed)
        if self.fusion_mode[2] == "C":
            return torch.cat(per_class, dim=0)
        return torch.stack(per_class).sum(dim=0)

    def decode(self, emb, n_way, query_hw):
        decoder = self.decoder_for(n_way)
        if emb.shape[0] != decoder.conv_in.in_channels:
            raise ConfigError(
                f"embedding has {emb.shape[0]} channels, decoder head expects "
                f"{decoder.conv_in.in_channels}"
            )
        logits, tap = decoder(emb.unsqueeze(0))
        logits = logits.squeeze(0)
        up = F.interpolate(logits.unsqueeze(0), size=tuple(query_hw),
                           mode="bilinear", align_corners=False).squeeze(0)
        probs = torch.softmax(up, dim=0)
        return SegPrediction(logits=logits, probs=probs, pml_embedding=tap.squeeze(0))

    def forward_episode(self, support_images, support_masks, query_image):
        """Run the full pipeline on one materialized episode."""
        n_way = support_images.shape[0]
        protos = self.support_prototypes(support_images, support_masks)
        query_feat = extract_features(query_image, self.backbone)
        scales = multiscale_query(query_feat, self.num_scales)
        emb = self.encode(scales, protos)
        return self.decode(emb, n_way, query_image.shape[-2:])


def build_model(cfg):
    """Model matching a TrainConfig-style object's architecture fields."""
    return MultiwaySegModel(
        cfg.backbone_config(),
        channels=cfg.channels,
        n_way=cfg.n_way,
        num_scales=cfg.z_scales,
        fusion_mode=cfg.fusion_mode,
        use_support_attention=cfg.use_support_attention,
        use_scale_attention=cfg.use_scale_attention,
        relation_groups=cfg.relation_groups,
    )
