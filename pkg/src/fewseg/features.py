"""Backbone feature taps, multi-scale query pooling, and masked global pooling.

Two backbones are available: a mid-level tap of a standard 50-layer residual
net (stages three and four concatenated and projected to C channels, stride 8
via dilation) and a small random conv net at the same stride for CPU-scale
runs. Both are frozen by default.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

# channel statistics for normalizing [0, 1] RGB inputs before the backbone
INPUT_MEAN = (0.485, 0.456, 0.406)
INPUT_STD = (0.229, 0.224, 0.225)


def normalize_image(image):
    """Standardize an HxWx3 float image in [0, 1] for backbone input."""
    mean = np.asarray(INPUT_MEAN, dtype=np.float32)
    std = np.asarray(INPUT_STD, dtype=np.float32)
    return (image - mean) / std


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "pretrained_midlevel"
    frozen: bool = True
    output_channels: int = 256
    weights_path: str = ""

    def validate(self):
        if self.kind not in ("pretrained_midlevel", "tiny_random"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.output_channels < 1:
            raise ConfigError("output_channels must be positive")


class TinyBackbone(nn.Module):
    """Four bias-free conv stages at stride 8, projected to C channels.

    Randomly initialized and meant to stay frozen; no normalization layers so
    repeated calls on the same input are bit-identical.
    """

    def __init__(self, out_channels):
        super().__init__()
        c = out_channels
        widths = [max(8, c // 4), max(16, c // 2), c, c]
        strides = [2, 2, 2, 1]
        layers = []
        prev = 3
        for w, s in zip(widths, strides):
            layers += [nn.Conv2d(prev, w, 3, stride=s, padding=1, bias=False), nn.ReLU(inplace=True)]
            prev = w
        self.stages = nn.Sequential(*layers)
        self.project = nn.Conv2d(prev, out_channels, 1, bias=False)
        # weights stay frozen, so they must be variance-preserving out of the box
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                nn.init.kaiming_normal_(mod.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        return self.project(self.stages(x))


class MidLevelResNetBackbone(nn.Module):
    """ResNet-50 stages 3 and 4 (stride 8 via dilation), concat + 1x1 to C."""

    def __init__(self, out_channels, weights_path=""):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None, replace_stride_with_dilation=[False, True, True])
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state, strict=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1)
        self.stage3 = net.layer2
        self.stage4 = net.layer3
        self.project = nn.Conv2d(512 + 1024, out_channels, 1, bias=False)

    def forward(self, x):
        x = self.stem(x)
        f3 = self.stage3(x)
        f4 = self.stage4(f3)
        return self.project(torch.cat([f3, f4], dim=1))


def build_backbone(cfg):
    cfg.validate()
    if cfg.kind == "tiny_random":
        net = TinyBackbone(cfg.output_channels)
    else:
        net = MidLevelResNetBackbone(cfg.output_channels, cfg.weights_path)
    if cfg.frozen:
        for p in net.parameters():
            p.requires_grad_(False)
        net.eval()
    return net


def extract_features(image, backbone):
    """Feature map (C, h, w) for an image tensor (3, H, W) or (B, 3, H, W)."""
    if not torch.isfinite(image).all():
        raise DataError("backbone input contains non-finite values")
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    feat = backbone(image)
    return feat.squeeze(0) if squeeze else feat


def partition_avg_pool(x, out_hw):
    """Adaptive average pooling over non-overlapping cells that tile the input.

    Cell i spans [floor(i*S/out), floor((i+1)*S/out)); the area-weighted mean
    of the output therefore equals the input mean exactly. Matches plain
    block pooling whenever the output size divides the input size.
    """
    oh, ow = out_hw
    h, w = x.shape[-2], x.shape[-1]
    if oh < 1 or ow < 1 or oh > h or ow > w:
        raise ConfigError(f"cannot pool {h}x{w} map to {oh}x{ow}")
    # integral image with a zero border for O(1) cell sums
    csum = x.cumsum(-1).cumsum(-2)
    pad = [1, 0, 1, 0]
    csum = F.pad(csum, pad)
    ys = torch.div(torch.arange(oh + 1, device=x.device) * h, oh, rounding_mode="floor")
    xs = torch.div(torch.arange(ow + 1, device=x.device) * w, ow, rounding_mode="floor")
    tl = csum[..., ys[:-1], :][..., :, xs[:-1]]
    br = csum[..., ys[1:], :][..., :, xs[1:]]
    tr = csum[..., ys[:-1], :][..., :, xs[1:]]
    bl = csum[..., ys[1:], :][..., :, xs[:-1]]
    sums = br - tr - bl + tl
    areas = (ys[1:] - ys[:-1]).reshape(-1, 1) * (xs[1:] - xs[:-1]).reshape(1, -1)
    return sums / areas.to(x.dtype)


def multiscale_query(feat, num_scales):
    """Pyramid of a query feature map; scale 1 is the native resolution.

    Each further scale halves the previous resolution (ceil), so resolutions
    are strictly decreasing and channel count is preserved.
    """
    if num_scales < 1:
        raise ConfigError("num_scales must be >= 1")
    h, w = feat.shape[-2], feat.shape[-1]
    sizes = [(h, w)]
    for _ in range(num_scales - 1):
        ph, pw = sizes[-1]
        nh, nw = (ph + 1) // 2, (pw + 1) // 2
        if (nh, nw) == (ph, pw):
            raise ConfigError(
                f"{num_scales} distinct scales infeasible from a {h}x{w} map"
            )
        sizes.append((nh, nw))
    return [feat if s == (h, w) else partition_avg_pool(feat, s) for s in sizes]


def downsample_mask(mask, out_hw):
    """Binary mask at feature resolution: any overlap counts as foreground."""
    m = mask
    if not torch.is_tensor(m):
        m = torch.from_numpy(m.astype("float32"))
    m = m.to(torch.float32)
    if m.shape[-2:] == tuple(out_hw):
        return m > 0
    return partition_avg_pool(m, out_hw) > 0


def masked_global_pool(feat, mask):
    """Average the feature map over foreground positions of an image mask.

    The mask is pooled to feature resolution first (any-overlap rule). When
    nothing survives, the unmasked global average is used as a fallback and
    a warning is logged.
    """
    c, h, w = feat.shape
    fg = downsample_mask(mask, (h, w)).to(feat.dtype)
    count = fg.sum()
    if count < 1:
        log.warning("mask empty at feature resolution; falling back to global average")
        return feat.mean(dim=(1, 2))
    return (feat * fg.unsqueeze(0)).sum(dim=(1, 2)) / count
