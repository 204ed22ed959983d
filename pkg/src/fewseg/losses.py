"""Segmentation and metric-learning objectives.

The segmentation loss is a class-weighted focal term over the (N+1)-way
probabilities. The metric-learning term mines triplets from three pixel
pools per class: anchors (correct predictions), hard positives (false
negatives), and hard negatives (false positives); anchors pair with a hard
positive drawn by spatial proximity and a uniformly drawn hard negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError

PROB_EPS = 1e-12
SELECT_STRATEGIES = ("spat", "rnd", "fea")


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    class_weighting: bool = True
    include_background: bool = True

    def validate(self):
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError("focal gamma must be finite and >= 0")


def focal_seg_loss(probs, gt, cfg=FocalConfig()):
    """Class-weighted focal loss over per-pixel probabilities.

    ``probs`` is (N+1, H, W) and already a per-pixel simplex; ``gt`` holds
    episode-local labels in [0, N]. Class weights come from this query's own
    pixel counts; absent classes contribute nothing.
    """
    cfg.validate()
    if not torch.is_tensor(gt):
        gt = torch.from_numpy(np.ascontiguousarray(gt)).long()
    gt = gt.long()
    n_plus_1, h, w = probs.shape
    if gt.shape != (h, w):
        raise ConfigError("probs and ground truth shapes disagree")
    if gt.min() < 0 or gt.max() >= n_plus_1:
        raise ConfigError(f"labels outside [0, {n_plus_1 - 1}]")

    classes = range(0 if cfg.include_background else 1, n_plus_1)
    m_total = float(h * w)
    p_true = probs.gather(0, gt.unsqueeze(0)).squeeze(0).clamp_min(PROB_EPS)
    per_pixel = (1.0 - p_true) ** cfg.gamma * torch.log(p_true)

    loss = probs.new_zeros(())
    num_classes = 0
    for n in classes:
        num_classes += 1
        sel = gt == n
        m_n = float(sel.sum().item())
        if m_n == 0:
            continue
        weight = 1.0 / math.log(1.1 + m_n / m_total) if cfg.class_weighting else 1.0
        loss = loss - weight * per_pixel[sel].sum()
    return loss / (m_total * num_classes)


@dataclass
class ClassPools:
    """Pixel index pools of one class: (y, x) int arrays."""

    anchors: np.ndarray
    hard_positives: np.ndarray
    hard_negatives: np.ndarray


@dataclass
class TripletPools:
    """Per-class pools mined from a (prediction, ground truth) mask pair."""

    per_class: dict[int, ClassPools] = field(default_factory=dict)

    def joint_anchor_count(self):
        return sum(len(p.anchors) for p in self.per_class.values())


def _coords(mask):
    ys, xs = np.nonzero(mask)
    return np.stack([ys, xs], axis=1).astype(np.int64)


def build_pools(pred_labels, gt_labels, episode_classes):
    """Mine anchor / hard-positive / hard-negative pixel pools per class.

    For episode-local class n: anchors are pixels with gt == pred == n, hard
    positives are pixels of n predicted as something else, hard negatives are
    pixels of other labels predicted as n. Pools may be empty.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ConfigError("prediction and ground truth shapes disagree")
    pools = TripletPools()
    for local in range(1, len(episode_classes) + 1):
        is_gt = gt == local
        is_pred = pred == local
        pools.per_class[local] = ClassPools(
            anchors=_coords(is_gt & is_pred),
            hard_positives=_coords(is_gt & ~is_pred),
            hard_negatives=_coords(~is_gt & is_pred),
        )
    return pools


@dataclass(frozen=True)
class Triplet:
    class_index: int
    anchor: tuple[int, int]
    positive: tuple[int, int]
    negative: tuple[int, int]


def _spatial_probabilities(anchor, candidates, tau):
    d = np.sqrt(((candidates - anchor) ** 2).sum(axis=1).astype(np.float64))
    logits = -d / tau
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def select_triplets(pools, num_triplets, strategy="spat", rng=None,
                    embedding=None, tau_scale=0.1, map_hw=None):
    """Pick up to ``num_triplets`` triplets from the mined pools.

    Seed anchors are drawn uniformly from the union of all anchor pools, and
    each triplet stays within its anchor's class. Strategies:

    - ``spat``: hard positive drawn with probability proportional to
      exp(-distance / tau), tau = tau_scale x map diagonal; hard negative
      uniform.
    - ``rnd``: both drawn uniformly.
    - ``fea``: hardest positive (max embedding distance) and closest negative
      (min embedding distance), computed within the pools only; requires the
      embedding map.

    Anchors whose class lacks hard positives or hard negatives produce no
    triplet. Deterministic given the generator state.
    """
    if strategy not in SELECT_STRATEGIES:
        raise ConfigError(f"unknown selection strategy {strategy!r}")
    if num_triplets < 0:
        raise ConfigError("num_triplets must be >= 0")
    if strategy == "fea" and embedding is None:
        raise ConfigError("strategy 'fea' needs the embedding map")
    if rng is None:
        rng = np.random.default_rng(0)

    entries = []  # (class, anchor_row) in deterministic order
    for local in sorted(pools.per_class):
        for row in pools.per_class[local].anchors:
            entries.append((local, row))
    if not entries or num_triplets == 0:
        return []

    take = min(num_triplets, len(entries))
    chosen = rng.choice(len(entries), size=take, replace=False)

    if map_hw is None:
        all_rows = np.concatenate(
            [p.anchors for p in pools.per_class.values() if len(p.anchors)]
            or [np.zeros((1, 2), dtype=np.int64)]
        )
        map_hw = (int(all_rows[:, 0].max()) + 1, int(all_rows[:, 1].max()) + 1)
    tau = tau_scale * math.hypot(*map_hw)

    emb_np = None
    if strategy == "fea":
        emb_np = embedding.detach().cpu().numpy() if torch.is_tensor(embedding) else np.asarray(embedding)

    triplets = []
    for idx in sorted(int(i) for i in chosen):
        local, anchor = entries[idx]
        cls_pools = pools.per_class[local]
        hp, hn = cls_pools.hard_positives, cls_pools.hard_negatives
        if len(hp) == 0 or len(hn) == 0:
            continue
        if strategy == "spat":
            p = _spatial_probabilities(anchor, hp, tau)
            pos = hp[int(rng.choice(len(hp), p=p))]
            neg = hn[int(rng.choice(len(hn)))]
        elif strategy == "rnd":
            pos = hp[int(rng.choice(len(hp)))]
            neg = hn[int(rng.choice(len(hn)))]
        else:
            f_a = emb_np[:, anchor[0], anchor[1]]
            d_pos = ((emb_np[:, hp[:, 0], hp[:, 1]] - f_a[:, None]) ** 2).sum(axis=0)
            d_neg = ((emb_np[:, hn[:, 0], hn[:, 1]] - f_a[:, None]) ** 2).sum(axis=0)
            pos = hp[int(d_pos.argmax())]
            neg = hn[int(d_neg.argmin())]
        triplets.append(Triplet(
            class_index=local,
            anchor=(int(anchor[0]), int(anchor[1])),
            positive=(int(pos[0]), int(pos[1])),
            negative=(int(neg[0]), int(neg[1])),
        ))
    return triplets


def triplet_loss(embedding, triplets, margin=1.0):
    """Hinged squared-distance triplet loss summed over the selected triplets.

    ``embedding`` is the (C, H, W) pixel-embedding map; an empty selection
    costs zero.
    """
    if not triplets:
        return embedding.new_zeros(()) if torch.is_tensor(embedding) else 0.0
    total = embedding.new_zeros(())
    for t in triplets:
        f_a = embedding[:, t.anchor[0], t.anchor[1]]
        f_p = embedding[:, t.positive[0], t.positive[1]]
        f_n = embedding[:, t.negative[0], t.negative[1]]
        gap = ((f_a - f_p) ** 2).sum() - ((f_a - f_n) ** 2).sum() + margin
        total = total + torch.clamp(gap, min=0.0)
    return total


def total_loss(seg_loss, pml_loss, pml_weight, epoch, pml_start_epoch):
    """Combined objective; the metric-learning term only counts once training
    has reached its start epoch."""
    if pml_weight < 0:
        raise ConfigError("pml_weight must be >= 0")
    if epoch >= pml_start_epoch:
        return seg_loss + pml_weight * pml_loss
    return seg_loss
