"""Episodic data protocol: fold splits, N-way K-shot sampling, label remapping.

A dataset on disk follows the layout

    <root>/images/<name>.<ext>     RGB images
    <root>/masks/<name>.png        single-channel integer label masks
    <root>/classes.txt             one ``<id> <name>`` per line
    <root>/fold<k>.txt             optional: one test-class id per line

Episodes reference images by name; manifests serialize those references as
line-delimited JSON records so an episode stream can be replayed exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, EpisodeError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

# Retries for re-drawing an episode whose query constraint cannot be met.
DEFAULT_SAMPLE_RETRIES = 50


@dataclass(frozen=True)
class FoldSpec:
    """A held-out block of classes plus the remaining train classes."""

    dataset_name: str
    fold_id: int
    train_classes: tuple[int, ...]
    test_classes: tuple[int, ...]

    def side(self, name):
        if name == "train":
            return self.train_classes
        if name == "test":
            return self.test_classes
        raise ConfigError(f"unknown fold side {name!r} (expected 'train' or 'test')")


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task: class ids, N x K support refs, one query ref.

    ``classes[i]`` is the dataset class id carrying episode-local label i+1.
    Support/query entries are image names resolvable through a DatasetIndex.
    """

    classes: tuple[int, ...]
    support: tuple[tuple[str, ...], ...]
    query: str
    mode: str = "any"

    @property
    def n_way(self):
        return len(self.classes)

    @property
    def k_shot(self):
        return len(self.support[0]) if self.support else 0


@dataclass
class DatasetIndex:
    """Per-class image lists for a dataset laid out on disk."""

    root: str
    class_names: dict[int, str]
    by_class: dict[int, list[str]] = field(default_factory=dict)
    image_paths: dict[str, str] = field(default_factory=dict)
    mask_paths: dict[str, str] = field(default_factory=dict)

    @property
    def class_ids(self):
        return sorted(self.class_names)

    def images_for(self, class_id):
        return self.by_class.get(class_id, [])

    def load_image(self, name):
        """Image as float32 HxWx3 in [0, 1]."""
        path = self.image_paths.get(name)
        if path is None or not os.path.exists(path):
            raise DataError(f"image {name!r} not found under {self.root}")
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
        return arr / 255.0

    def load_mask(self, name):
        """Raw label mask as int32 HxW."""
        path = self.mask_paths.get(name)
        if path is None or not os.path.exists(path):
            raise DataError(f"mask for {name!r} not found under {self.root}")
        mask = np.asarray(Image.open(path), dtype=np.int32)
        if mask.ndim != 2:
            raise DataError(f"mask {path} is not single-channel")
        return mask


def build_fold_split(class_ids, fold_id, num_folds, dataset_name="dataset"):
    """Split an ordered class list into the fold_id-th contiguous test block."""
    class_ids = list(class_ids)
    if num_folds <= 0 or len(class_ids) % num_folds != 0:
        raise ConfigError(
            f"{len(class_ids)} classes cannot be split into {num_folds} equal folds"
        )
    if not 0 <= fold_id < num_folds:
        raise ConfigError(f"fold_id {fold_id} outside [0, {num_folds})")
    block = len(class_ids) // num_folds
    test = class_ids[fold_id * block : (fold_id + 1) * block]
    train = [c for c in class_ids if c not in set(test)]
    return FoldSpec(dataset_name, fold_id, tuple(train), tuple(test))


def read_classes_file(path):
    table = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(None, 1)
            try:
                cid = int(parts[0])
            except ValueError as exc:
                raise DataError(f"bad class line {line!r} in {path}") from exc
            table[cid] = parts[1] if len(parts) > 1 else str(cid)
    if not table:
        raise DataError(f"no classes listed in {path}")
    return table


def load_fold_spec(root, fold_id, num_folds, dataset_name="dataset"):
    """Fold from ``fold<k>.txt`` when present, else the contiguous-block default."""
    classes_path = os.path.join(root, "classes.txt")
    table = read_classes_file(classes_path)
    class_ids = sorted(table)
    fold_file = os.path.join(root, f"fold{fold_id}.txt")
    if os.path.exists(fold_file):
        with open(fold_file) as fh:
            test = [int(line.strip()) for line in fh if line.strip()]
        bad = [c for c in test if c not in table]
        if bad:
            raise DataError(f"fold file {fold_file} lists unknown classes {bad}")
        train = [c for c in class_ids if c not in set(test)]
        return FoldSpec(dataset_name, fold_id, tuple(train), tuple(sorted(test)))
    return build_fold_split(class_ids, fold_id, num_folds, dataset_name)


def build_index(root):
    """Scan a dataset layout into a DatasetIndex.

    Deterministic given the file layout: names are sorted, and a class lists
    exactly the images whose mask contains its label.
    """
    images_dir = os.path.join(root, "images")
    masks_dir = os.path.join(root, "masks")
    classes_path = os.path.join(root, "classes.txt")
    if not (os.path.isdir(images_dir) and os.path.isdir(masks_dir)):
        raise DataError(f"{root} does not contain images/ and masks/ directories")
    class_names = read_classes_file(classes_path)

    index = DatasetIndex(root=root, class_names=class_names)
    for fname in sorted(os.listdir(images_dir)):
        stem, ext = os.path.splitext(fname)
        if ext.lower() not in IMAGE_EXTENSIONS:
            continue
        mask_path = os.path.join(masks_dir, stem + ".png")
        if not os.path.exists(mask_path):
            raise DataError(f"no mask for image {fname} (expected {mask_path})")
        index.image_paths[stem] = os.path.join(images_dir, fname)
        index.mask_paths[stem] = mask_path
        mask = np.asarray(Image.open(mask_path), dtype=np.int32)
        for cid in np.unique(mask):
            cid = int(cid)
            if cid == 0:
                continue
            if cid not in class_names:
                raise DataError(f"mask {mask_path} contains unlisted class {cid}")
            index.by_class.setdefault(cid, []).append(stem)
    return index


def remap_labels(raw_mask, episode_classes):
    """Map dataset class ids to episode-local labels 1..N; everything else to 0."""
    out = np.zeros_like(np.asarray(raw_mask), dtype=np.int32)
    for local, cid in enumerate(episode_classes, start=1):
        out[raw_mask == cid] = local
    return out


def _mask_classes(index, name):
    mask = index.load_mask(name)
    return set(int(c) for c in np.unique(mask) if c != 0)


def sample_episode(index, split_classes, n_way, k_shot, mode="any", rng=None,
                   max_retries=DEFAULT_SAMPLE_RETRIES):
    """Draw one N-way K-shot episode from the given side of a fold split.

    The query must contain at least one episode class (mode ``any``) or all
    of them (mode ``all``); no support image may equal the query. Identical
    generator state yields an identical episode.
    """
    if rng is None:
        raise ConfigError("sample_episode requires a seeded numpy Generator")
    if n_way < 1 or k_shot < 1:
        raise ConfigError(f"need n_way >= 1 and k_shot >= 1, got {n_way}, {k_shot}")
    if mode not in ("any", "all"):
        raise ConfigError(f"unknown episode mode {mode!r}")
    split_classes = sorted(split_classes)
    usable = [c for c in split_classes if len(index.images_for(c)) >= 2]
    if len(usable) < n_way:
        raise EpisodeError(
            f"split has {len(usable)} usable classes, episode needs {n_way}"
        )

    for _ in range(max_retries):
        classes = [int(c) for c in rng.choice(usable, size=n_way, replace=False)]
        if mode == "all":
            candidates = set(index.images_for(classes[0]))
            for cid in classes[1:]:
                candidates &= set(index.images_for(cid))
        else:
            candidates = set()
            for cid in classes:
                candidates |= set(index.images_for(cid))
        candidates = sorted(candidates)
        if not candidates:
            continue
        query = str(rng.choice(candidates))

        support = []
        feasible = True
        for cid in classes:
            pool = [nm for nm in index.images_for(cid) if nm != query]
            if len(pool) < k_shot:
                feasible = False
                break
            support.append(tuple(str(s) for s in rng.choice(pool, size=k_shot, replace=False)))
        if not feasible:
            continue
        return Episode(tuple(classes), tuple(support), query, mode)

    raise EpisodeError(
        f"could not sample a {n_way}-way {k_shot}-shot mode={mode} episode "
        f"after {max_retries} retries"
    )


def episode_query_mask(index, episode):
    """Query ground truth remapped to episode-local labels {0..N}."""
    return remap_labels(index.load_mask(episode.query), episode.classes)


def episode_support_mask(index, episode, n_local, k):
    """Binary mask for the k-th support image of episode-local class n_local."""
    cid = episode.classes[n_local - 1]
    raw = index.load_mask(episode.support[n_local - 1][k])
    return (raw == cid).astype(np.uint8)


def write_manifest(episodes, path):
    """Line-delimited JSON records for exact replay."""
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps({
                "classes": list(ep.classes),
                "support": [list(shots) for shots in ep.support],
                "query": ep.query,
                "mode": ep.mode,
            }) + "\n")


def read_manifest(path):
    episodes = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                episodes.append(Episode(
                    tuple(int(c) for c in rec["classes"]),
                    tuple(tuple(s) for s in rec["support"]),
                    rec["query"],
                    rec.get("mode", "any"),
                ))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"bad manifest record at {path}:{ln}") from exc
    return episodes
