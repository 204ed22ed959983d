"""Synthetic shapes dataset: a desk-scale stand-in for fold-split benchmarks.

Each class is a (shape, texture) combination. Images carry one or two shapes
on a noisy background; masks are rasterized analytically, and every shape's
parameters are stored in ``shapes.jsonl`` so a test can re-rasterize the mask
and compare it to the saved PNG pixel-for-pixel.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .episodes import DatasetIndex, build_fold_split
from .errors import ConfigError

SHAPE_KINDS = ("circle", "square", "triangle", "diamond")

_PALETTE = np.array([
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.35, 0.85],
    [0.90, 0.80, 0.15],
    [0.75, 0.25, 0.80],
    [0.15, 0.75, 0.75],
    [0.95, 0.55, 0.15],
    [0.55, 0.35, 0.15],
], dtype=np.float32)


@dataclass(frozen=True)
class SynthSpec:
    """Generator configuration."""

    num_classes: int = 8
    images_per_class: int = 20
    image_size: int = 96
    cooccur_fraction: float = 0.6
    min_radius_frac: float = 0.22
    max_radius_frac: float = 0.36
    noise_std: float = 0.04
    num_folds: int = 4

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("synthetic dataset needs at least 2 classes")
        if self.num_classes > len(SHAPE_KINDS) * len(_PALETTE):
            raise ConfigError(
                f"at most {len(SHAPE_KINDS) * len(_PALETTE)} distinct classes supported"
            )
        if self.images_per_class < 1 or self.image_size < 32:
            raise ConfigError("images_per_class >= 1 and image_size >= 32 required")
        if not 0.0 <= self.cooccur_fraction <= 1.0:
            raise ConfigError("cooccur_fraction must lie in [0, 1]")


def class_definition(class_id):
    """Shape kind and color index for a 1-based class id."""
    i = class_id - 1
    kind = SHAPE_KINDS[i % len(SHAPE_KINDS)]
    color = _PALETTE[(i * 3 + i // len(SHAPE_KINDS)) % len(_PALETTE)]
    return kind, color


def rasterize_shape(kind, cy, cx, radius, size):
    """Boolean mask of one shape on a size x size grid.

    Pure analytic rasterization over pixel centers; reproducible from the
    stored (kind, cy, cx, radius) parameters alone.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= radius * radius
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= radius
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= radius
    if kind == "triangle":
        # apex-up triangle inscribed in the radius box
        return (dy <= radius) & (2.0 * np.abs(dx) <= dy + radius)
    raise ConfigError(f"unknown shape kind {kind!r}")


def rasterize_record(record, size):
    """Label mask for one image's stored shape records (later shapes on top)."""
    mask = np.zeros((size, size), dtype=np.uint8)
    for shp in record["shapes"]:
        m = rasterize_shape(shp["kind"], shp["cy"], shp["cx"], shp["radius"], size)
        mask[m] = shp["class_id"]
    return mask


def _paint_shape(image, shape_mask, color, class_id, rng):
    h, w, _ = image.shape
    fill = np.tile(color, (h, w, 1))
    if class_id % 2 == 0:
        # even classes get a stripe texture so same-shape classes stay distinct
        yy = np.arange(h)[:, None] + np.arange(w)[None, :]
        stripes = ((yy // 3) % 2).astype(np.float32) * 0.35
        fill = np.clip(fill - stripes[..., None], 0.0, 1.0)
    image[shape_mask] = fill[shape_mask]
    return image


def _place_in_box(box, size, rng, spec):
    """Shape parameters fitting inside (y0, y1, x0, x1); always succeeds."""
    y0, y1, x0, x1 = box
    fit = (min(y1 - y0, x1 - x0) - 2) / 2.0 - 1.0
    rad_hi = min(spec.max_radius_frac * size, fit)
    rad_lo = min(spec.min_radius_frac * size, rad_hi)
    radius = float(rng.uniform(rad_lo, rad_hi))
    cy = float(rng.uniform(y0 + radius + 1, y1 - radius - 1))
    cx = float(rng.uniform(x0 + radius + 1, x1 - radius - 1))
    return cy, cx, radius


def _layout_boxes(num_shapes, size, rng):
    """One box per shape: the full frame, or two disjoint halves."""
    if num_shapes == 1:
        return [(0, size, 0, size)]
    if rng.random() < 0.5:
        boxes = [(0, size, 0, size // 2), (0, size, size // 2, size)]
    else:
        boxes = [(0, size // 2, 0, size), (size // 2, size, 0, size)]
    if rng.random() < 0.5:
        boxes.reverse()
    return boxes


def synth_shapes(spec, rng, root):
    """Generate the dataset under ``root`` and return its DatasetIndex.

    ``root`` receives the standard layout plus ``shapes.jsonl`` with one
    parameter record per image. Fold files are written when the class count
    divides evenly.
    """
    spec.validate()
    size = spec.image_size
    images_dir = os.path.join(root, "images")
    masks_dir = os.path.join(root, "masks")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)

    class_ids = list(range(1, spec.num_classes + 1))
    with open(os.path.join(root, "classes.txt"), "w") as fh:
        for cid in class_ids:
            kind, _ = class_definition(cid)
            fh.write(f"{cid} {kind}_{cid}\n")
    if spec.num_folds > 0 and spec.num_classes % spec.num_folds == 0:
        for k in range(spec.num_folds):
            fold = build_fold_split(class_ids, k, spec.num_folds)
            with open(os.path.join(root, f"fold{k}.txt"), "w") as fh:
                fh.writelines(f"{cid}\n" for cid in fold.test_classes)

    index = DatasetIndex(root=root, class_names={
        cid: f"{class_definition(cid)[0]}_{cid}" for cid in class_ids
    })
    records = []
    counter = 0
    for cid in class_ids:
        for _ in range(spec.images_per_class):
            name = f"img{counter:05d}"
            counter += 1

            base = 0.45 + 0.1 * rng.standard_normal()
            image = np.full((size, size, 3), np.clip(base, 0.2, 0.7), dtype=np.float32)
            ramp = np.linspace(-0.05, 0.05, size, dtype=np.float32)
            image += ramp[None, :, None]
            image += rng.normal(0.0, spec.noise_std, size=image.shape).astype(np.float32)

            shapes = []
            members = [cid]
            if spec.num_classes >= 2 and rng.random() < spec.cooccur_fraction:
                others = [c for c in class_ids if c != cid]
                members.append(int(rng.choice(others)))
            boxes = _layout_boxes(len(members), size, rng)
            for member, box in zip(members, boxes):
                cy, cx, radius = _place_in_box(box, size, rng, spec)
                kind, color = class_definition(member)
                m = rasterize_shape(kind, cy, cx, radius, size)
                image = _paint_shape(image, m, color, member, rng)
                shapes.append({
                    "class_id": member, "kind": kind,
                    "cy": cy, "cx": cx, "radius": radius,
                })

            record = {"name": name, "shapes": shapes}
            mask = rasterize_record(record, size)
            records.append(record)

            image_u8 = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
            img_path = os.path.join(images_dir, name + ".png")
            mask_path = os.path.join(masks_dir, name + ".png")
            Image.fromarray(image_u8).save(img_path)
            Image.fromarray(mask, mode="L").save(mask_path)

            index.image_paths[name] = img_path
            index.mask_paths[name] = mask_path
            for present in sorted(set(s["class_id"] for s in shapes)):
                index.by_class.setdefault(present, []).append(name)

    with open(os.path.join(root, "shapes.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return index


def read_shape_records(root):
    records = []
    with open(os.path.join(root, "shapes.jsonl")) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records
