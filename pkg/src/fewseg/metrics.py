"""Confusion accumulation and IoU scoring for episodic evaluation.

Two protocols are supported. Under ``miou``, a pixel predicted as an episode
class that is absent from the query's ground truth counts only as a false
negative of its true class. Under ``miou_star``, it additionally counts as a
false positive of the predicted class, so the starred score can never exceed
the plain one. Both are identical for 1-way streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, UndefinedScoreError

PROTOCOLS = ("miou", "miou_star")


@dataclass
class ConfusionState:
    """Per-dataset-class (tp, fp, fn) pixel counts; a commutative monoid.

    Background contributes counters under class id 0 for conservation checks
    but is never scored.
    """

    protocol: str = "miou_star"
    tp: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    fn: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}")

    def _bump(self, table, class_id, amount):
        if amount:
            table[class_id] = table.get(class_id, 0) + int(amount)

    def classes(self):
        keys = set(self.tp) | set(self.fp) | set(self.fn)
        return sorted(k for k in keys if k != 0)

    def merge(self, other):
        if other.protocol != self.protocol:
            raise ConfigError("cannot merge states with different protocols")
        out = ConfusionState(protocol=self.protocol)
        for src in (self, other):
            for table_name in ("tp", "fp", "fn"):
                for cid, count in getattr(src, table_name).items():
                    out._bump(getattr(out, table_name), cid, count)
        return out


def accumulate(state, pred, gt, episode_classes):
    """Fold one episode's (prediction, ground truth) pair into the state.

    Masks hold episode-local labels in [0, N]; counts are recorded against
    the dataset class ids in ``episode_classes``.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError("prediction and ground truth shapes disagree")
    n_way = len(episode_classes)
    if pred.min() < 0 or pred.max() > n_way or gt.min() < 0 or gt.max() > n_way:
        raise DataError(f"episode-local labels outside [0, {n_way}]")

    present = set(int(v) for v in np.unique(gt) if v != 0)
    pair_counts = np.bincount(
        (gt.astype(np.int64) * (n_way + 1) + pred.astype(np.int64)).ravel(),
        minlength=(n_way + 1) ** 2,
    ).reshape(n_way + 1, n_way + 1)

    def dataset_id(local):
        return 0 if local == 0 else int(episode_classes[local - 1])

    for g in range(n_way + 1):
        for p in range(n_way + 1):
            count = int(pair_counts[g, p])
            if count == 0:
                continue
            if g == p:
                state._bump(state.tp, dataset_id(g), count)
                continue
            state._bump(state.fn, dataset_id(g), count)
            if p == 0:
                state._bump(state.fp, 0, count)
            elif p in present or state.protocol == "miou_star":
                state._bump(state.fp, dataset_id(p), count)
    return state


def score(state):
    """Per-class IoU and the mean over classes with a nonzero denominator."""
    per_class = {}
    for cid in state.classes():
        denom = state.tp.get(cid, 0) + state.fp.get(cid, 0) + state.fn.get(cid, 0)
        if denom == 0:
            continue
        per_class[cid] = state.tp.get(cid, 0) / denom
    if not per_class:
        raise UndefinedScoreError("every class has an empty IoU denominator")
    mean = sum(per_class.values()) / len(per_class)
    return per_class, mean


def aggregate_runs(run_means):
    """Mean and sample standard deviation over per-run mean scores."""
    values = [float(v) for v in run_means]
    if not values:
        raise ConfigError("aggregate_runs needs at least one run")
    mean = sum(values) / len(values)
    if len(values) == 1:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)
