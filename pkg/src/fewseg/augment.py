"""Paired image/mask transforms for training and evaluation.

Training augmentation: scale jitter in [0.9, 1.1], rotation in +-10 degrees,
crop (or pad) back to the input size, and a horizontal mirror with
probability 0.5 -- always applied identically to the image and its mask.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

SCALE_RANGE = (0.9, 1.1)
ROTATION_DEGREES = 10.0
MIRROR_PROB = 0.5


def resize_pair(image, mask, size):
    """Bilinear image / nearest mask resize to a square ``size``."""
    if image.shape[0] == size and image.shape[1] == size:
        return image.astype(np.float32), mask.astype(np.int32)
    img = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)
    img = F.interpolate(img.unsqueeze(0), size=(size, size), mode="bilinear",
                        align_corners=False).squeeze(0).permute(1, 2, 0)
    msk = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))
    msk = F.interpolate(msk.unsqueeze(0).unsqueeze(0), size=(size, size),
                        mode="nearest").squeeze()
    return img.numpy(), msk.numpy().astype(np.int32)


def _crop_or_pad(image, mask, size, rng):
    h, w = mask.shape
    if h < size or w < size:
        py, px = max(0, size - h), max(0, size - w)
        top, left = py // 2, px // 2
        image = np.pad(image, ((top, py - top), (left, px - left), (0, 0)), mode="edge")
        mask = np.pad(mask, ((top, py - top), (left, px - left)), mode="constant")
        h, w = mask.shape
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    return image[y0:y0 + size, x0:x0 + size], mask[y0:y0 + size, x0:x0 + size]


def augment_pair(image, mask, size, rng):
    """One stochastic draw of the training transform for an image/mask pair."""
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.int32)

    scale = float(rng.uniform(*SCALE_RANGE))
    if abs(scale - 1.0) > 1e-6:
        image = ndimage.zoom(image, (scale, scale, 1.0), order=1, mode="nearest")
        mask = ndimage.zoom(mask, (scale, scale), order=0, mode="constant")

    angle = float(rng.uniform(-ROTATION_DEGREES, ROTATION_DEGREES))
    image = ndimage.rotate(image, angle, reshape=False, order=1, mode="nearest")
    mask = ndimage.rotate(mask, angle, reshape=False, order=0, mode="constant")

    image, mask = _crop_or_pad(image, mask, size, rng)

    if rng.random() < MIRROR_PROB:
        image = image[:, ::-1]
        mask = mask[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)
