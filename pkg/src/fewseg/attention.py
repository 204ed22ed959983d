"""Two attention schemes for the multi-way pipeline.

SupportRelationAttention modulates the K pooled support vectors of one class
with grouped query/key/value projections before they are averaged into the
class prototype. ScaleAttention produces, per scale, a 1-channel attention
map and a C-channel transformed map; combine_scales turns those branches
into a per-pixel convex combination across scales. Both modules are shared
across the N class branches.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


class SupportRelationAttention(nn.Module):
    """Grouped relational attention over K support vectors of one class.

    For each group r, vectors are projected to d_k = C / num_groups, scores
    are scaled dot products softmaxed over the K candidates, and the value
    projections are mixed and concatenated back to C channels; the result is
    added to the inputs as a modulator.
    """

    def __init__(self, channels, num_groups):
        super().__init__()
        if channels % num_groups != 0:
            raise ConfigError(f"num_groups {num_groups} must divide channels {channels}")
        self.channels = channels
        self.num_groups = num_groups
        self.head_dim = channels // num_groups
        shape_qk = (num_groups, self.head_dim, channels)
        shape_v = (num_groups, channels // num_groups, channels)
        self.w_a = nn.Parameter(torch.empty(shape_qk))
        self.w_b = nn.Parameter(torch.empty(shape_qk))
        self.w_v = nn.Parameter(torch.empty(shape_v))
        for w in (self.w_a, self.w_b, self.w_v):
            nn.init.kaiming_uniform_(w.view(-1, channels), a=math.sqrt(5))

    def relation_weights(self, feats, group):
        """K x K row-stochastic relation matrix for one projection group."""
        a = feats @ self.w_a[group].T
        b = feats @ self.w_b[group].T
        logits = (a @ b.T) / math.sqrt(self.head_dim)
        return torch.softmax(logits, dim=-1)

    def modulate(self, feats):
        """Add the concatenated per-group relational features to each input."""
        a = torch.einsum("rdc,kc->rkd", self.w_a, feats)
        b = torch.einsum("rdc,kc->rkd", self.w_b, feats)
        logits = torch.einsum("rkd,rjd->rkj", a, b) / math.sqrt(self.head_dim)
        weights = torch.softmax(logits, dim=-1)
        values = torch.einsum("rvc,jc->rjv", self.w_v, feats)
        mixed = torch.einsum("rkj,rjv->rkv", weights, values)
        relational = mixed.permute(1, 0, 2).reshape(feats.shape[0], self.channels)
        return feats + relational


def class_prototype(feats, relation=None, use_support_attention=True):
    """Average K pooled support vectors into one prototype.

    The relational modulation only applies for K > 1; a single shot is passed
    through unchanged.
    """
    if feats.dim() != 2:
        raise ConfigError("expected a (K, C) stack of support vectors")
    if use_support_attention and relation is not None and feats.shape[0] > 1:
        feats = relation.modulate(feats)
    return feats.mean(dim=0)


def init_conv_relu(module):
    """Variance-preserving init for conv stacks that have no normalization."""
    if isinstance(module, nn.Conv2d):
        nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class ResidualBlock(nn.Module):
    """Two 3x3 convs with a rectifier and an identity skip."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.apply(init_conv_relu)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class ScaleAttention(nn.Module):
    """Per-scale self-attention branches, shared across classes and scales.

    The attention branch is two 3x3 convs and a 1x1 conv down to one channel;
    the transform branch is a 1x1 conv followed by a two-layer residual
    block, keeping C channels.
    """

    def __init__(self, channels):
        super().__init__()
        self.attn = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(channels, 1, 1),
        )
        self.attn.apply(init_conv_relu)
        # start from uniform scale weights; gradients break the symmetry
        nn.init.zeros_(self.attn[-1].weight)
        nn.init.zeros_(self.attn[-1].bias)
        self.transform_in = nn.Conv2d(channels, channels, 1)
        init_conv_relu(self.transform_in)
        self.transform_res = ResidualBlock(channels)

    def forward(self, x):
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        attn = self.attn(x)
        transformed = self.transform_res(self.transform_in(x))
        if squeeze:
            return attn.squeeze(0), transformed.squeeze(0)
        return attn, transformed


def _upsample(x, size):
    if x.shape[-2:] == tuple(size):
        return x
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    x = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
    return x.squeeze(0) if squeeze else x


def combine_scales(branches, size=None):
    """Convex per-pixel combination of per-scale transformed maps.

    ``branches`` is a list of (attention map (1, h, w), transformed map
    (C, h, w)) pairs. All maps are upsampled to ``size`` (default: the
    largest branch resolution); attention values are softmaxed across scales
    per pixel and used as mixing weights.
    """
    if not branches:
        raise ConfigError("combine_scales needs at least one branch")
    if size is None:
        size = max((t.shape[-2], t.shape[-1]) for _, t in branches)
    attn = torch.stack([_upsample(a, size) for a, _ in branches])   # (Z, 1, H, W)
    trans = torch.stack([_upsample(t, size) for _, t in branches])  # (Z, C, H, W)
    weights = torch.softmax(attn, dim=0)
    return (trans * weights).sum(dim=0)
