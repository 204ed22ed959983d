"""Episodic trainer, evaluation driver, and single-episode prediction."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from . import losses as L
from .augment import augment_pair, resize_pair
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .episodes import (Episode, build_index, episode_query_mask, episode_support_mask,
                       load_fold_spec, sample_episode, write_manifest)
from .errors import ConfigError, DataError, NumericalAbort
from .features import normalize_image
from .metrics import ConfusionState, accumulate, aggregate_runs, score
from .network import build_model
from .synthetic import SynthSpec, synth_shapes

log = logging.getLogger(__name__)


def poly_lr(base_lr, iteration, max_iter, power):
    """Polynomial decay: base_lr * (1 - iteration / max_iter) ** power."""
    frac = 1.0 - iteration / max_iter
    return base_lr * max(frac, 0.0) ** power


def nearest_labels(mask, out_hw):
    """Label mask at feature resolution via center-point nearest sampling."""
    h, w = mask.shape
    oh, ow = out_hw
    ys = np.clip((((np.arange(oh) + 0.5) * h / oh) - 0.5).round().astype(int), 0, h - 1)
    xs = np.clip((((np.arange(ow) + 0.5) * w / ow) - 0.5).round().astype(int), 0, w - 1)
    return mask[np.ix_(ys, xs)]


def prepare_dataset(cfg):
    """Resolve (index, fold split) for the configured dataset, generating the
    synthetic layout on first use."""
    if cfg.dataset == "synthetic":
        root = cfg.data_root or os.path.join(cfg.out_dir, "synth")
        if not os.path.exists(os.path.join(root, "classes.txt")):
            spec = SynthSpec(
                num_classes=cfg.synth_classes,
                images_per_class=cfg.synth_images_per_class,
                image_size=cfg.input_size,
                cooccur_fraction=cfg.synth_cooccur,
                num_folds=cfg.num_folds,
            )
            synth_shapes(spec, np.random.default_rng(cfg.synth_seed), root)
        index = build_index(root)
    else:
        if not cfg.data_root:
            raise ConfigError("data_root is required for dataset = layout")
        index = build_index(cfg.data_root)
        root = cfg.data_root
    fold = load_fold_spec(root, cfg.fold, cfg.num_folds, dataset_name=cfg.dataset)
    return index, fold


@dataclass
class EpisodeTensors:
    episode: Episode
    support_images: torch.Tensor  # (N, K, 3, H, W)
    support_masks: torch.Tensor   # (N, K, H, W)
    query_image: torch.Tensor     # (3, H, W)
    query_gt: np.ndarray          # (H, W) episode-local labels


def materialize_episode(index, episode, size, augment=False, rng=None):
    """Load, resize, normalize, and optionally augment an episode's images."""
    def prep(image, mask):
        image, mask = resize_pair(image, mask, size)
        if augment:
            image, mask = augment_pair(image, mask, size, rng)
        return normalize_image(image), mask

    sup_imgs, sup_masks = [], []
    for n in range(1, episode.n_way + 1):
        imgs, masks = [], []
        for k, name in enumerate(episode.support[n - 1]):
            img, msk = prep(index.load_image(name),
                            episode_support_mask(index, episode, n, k))
            imgs.append(torch.from_numpy(img).permute(2, 0, 1))
            masks.append(torch.from_numpy((msk > 0).astype(np.float32)))
        sup_imgs.append(torch.stack(imgs))
        sup_masks.append(torch.stack(masks))

    q_img, q_gt = prep(index.load_image(episode.query),
                       episode_query_mask(index, episode))
    return EpisodeTensors(
        episode=episode,
        support_images=torch.stack(sup_imgs),
        support_masks=torch.stack(sup_masks),
        query_image=torch.from_numpy(q_img).permute(2, 0, 1),
        query_gt=q_gt,
    )


def episode_losses(model, cfg, tensors, epoch, pml_rng):
    """Forward one episode and compute (seg_loss, pml_loss, n_triplets)."""
    pred = model.forward_episode(tensors.support_images, tensors.support_masks,
                                 tensors.query_image)
    gt = torch.from_numpy(np.ascontiguousarray(tensors.query_gt)).long()
    seg = L.focal_seg_loss(pred.probs, gt, cfg.focal_config())

    pml = pred.logits.new_zeros(())
    n_triplets = 0
    if cfg.use_pml and epoch >= cfg.pml_start_epoch:
        feat_hw = pred.pml_embedding.shape[-2:]
        gt_feat = nearest_labels(tensors.query_gt, feat_hw)
        pred_feat = pred.pred_labels_featres.detach().cpu().numpy()
        pools = L.build_pools(pred_feat, gt_feat, tensors.episode.classes)
        triplets = L.select_triplets(
            pools, cfg.pml_n_t, strategy=cfg.pml_strategy, rng=pml_rng,
            embedding=pred.pml_embedding.detach(), tau_scale=cfg.pml_tau_scale,
            map_hw=tuple(feat_hw),
        )
        pml = L.triplet_loss(pred.pml_embedding, triplets, cfg.pml_alpha)
        n_triplets = len(triplets)
    return pred, seg, pml, n_triplets


class EpisodeStream:
    """Deterministic source of training episodes: fresh draws or a cycled pool."""

    def __init__(self, index, classes, cfg, rng):
        self.index = index
        self.classes = classes
        self.cfg = cfg
        self.rng = rng
        self.pool = None
        self.cursor = 0
        if cfg.episode_pool > 0:
            self.pool = [self._draw() for _ in range(cfg.episode_pool)]

    def _draw(self):
        return sample_episode(self.index, self.classes, self.cfg.n_way,
                              self.cfg.k_shot, self.cfg.episode_mode, self.rng)

    def __next__(self):
        if self.pool is None:
            return self._draw()
        ep = self.pool[self.cursor % len(self.pool)]
        self.cursor += 1
        return ep


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    history: list


def train(cfg):
    """Run episodic training and return checkpoint/log paths plus history."""
    cfg.validate()
    if cfg.threads > 0:
        torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    os.makedirs(cfg.out_dir, exist_ok=True)

    index, fold = prepare_dataset(cfg)
    model = build_model(cfg)
    optimizer = torch.optim.SGD(model.trainable_parameters(), lr=cfg.lr,
                                momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)

    sample_rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng(cfg.seed + 1)
    pml_rng = np.random.default_rng(cfg.seed + 2)
    stream = EpisodeStream(index, fold.train_classes, cfg, sample_rng)

    iters_per_epoch = math.ceil(cfg.episodes_per_epoch / cfg.batch_size)
    max_iter = cfg.epochs * iters_per_epoch
    log_path = os.path.join(cfg.out_dir, "train_log.jsonl")
    ckpt_path = os.path.join(cfg.out_dir, "model.fsegckpt")
    history = []

    iteration = 0
    with open(log_path, "w") as log_fh:
        for epoch in range(cfg.epochs):
            for _ in range(iters_per_epoch):
                lr = poly_lr(cfg.lr, iteration, max_iter, cfg.poly_power)
                for group in optimizer.param_groups:
                    group["lr"] = lr

                seg_vals, pml_vals, triplet_count = [], [], 0
                batch_terms = []
                batch_episodes = []
                for _ in range(cfg.batch_size):
                    episode = next(stream)
                    batch_episodes.append(episode)
                    tensors = materialize_episode(index, episode, cfg.input_size,
                                                  augment=cfg.augment, rng=aug_rng)
                    _, seg, pml, n_trip = episode_losses(model, cfg, tensors,
                                                         epoch, pml_rng)
                    batch_terms.append(L.total_loss(seg, pml, cfg.pml_lambda,
                                                    epoch, cfg.pml_start_epoch))
                    seg_vals.append(float(seg.detach()))
                    pml_vals.append(float(pml.detach()))
                    triplet_count += n_trip

                batch_loss = torch.stack(batch_terms).mean()
                if not torch.isfinite(batch_loss):
                    dump = os.path.join(cfg.out_dir, "abort_episodes.jsonl")
                    write_manifest(batch_episodes, dump)
                    raise NumericalAbort(
                        f"non-finite loss at iteration {iteration} "
                        f"(queries {[ep.query for ep in batch_episodes]}; dump: {dump})"
                    )
                optimizer.zero_grad()
                batch_loss.backward()
                optimizer.step()

                record = {
                    "iter": iteration,
                    "epoch": epoch,
                    "lr": lr,
                    "loss_seg": sum(seg_vals) / len(seg_vals),
                    "loss_pml": sum(pml_vals) / len(pml_vals),
                    "triplets": triplet_count,
                }
                log_fh.write(json.dumps(record) + "\n")
                history.append(record)
                iteration += 1
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, cfg,
                                os.path.join(cfg.out_dir, f"model_ep{epoch + 1}.fsegckpt"))

    save_checkpoint(model, cfg, ckpt_path)
    log.info("training finished: %s", ckpt_path)
    return TrainResult(ckpt_path, log_path, history)


def parameter_digest(model):
    """SHA-256 over all parameter bytes, for purity/reproducibility checks."""
    digest = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def predict_episode(model, index, episode, size):
    """Predicted episode-local label mask for one episode at input size."""
    tensors = materialize_episode(index, episode, size, augment=False)
    with torch.no_grad():
        pred = model.forward_episode(tensors.support_images, tensors.support_masks,
                                     tensors.query_image)
    return pred.pred_labels.cpu().numpy().astype(np.int32), tensors.query_gt


def evaluate(cfg, checkpoint_path, episodes, runs, side="test"):
    """Stream test episodes through a frozen model under both protocols.

    Returns a report dict; each run uses its own derived seed so a fixed
    base seed reproduces the whole report exactly.
    """
    model, ckpt_cfg = load_checkpoint(checkpoint_path, expected_cfg=cfg)
    model.eval()
    index, fold = prepare_dataset(cfg)
    classes = fold.side(side)

    protocols = {}
    merged = {p: ConfusionState(protocol=p) for p in ("miou", "miou_star")}
    run_means = {p: [] for p in merged}
    for run in range(runs):
        rng = np.random.default_rng(cfg.seed + 1000 * run)
        states = {p: ConfusionState(protocol=p) for p in merged}
        for _ in range(episodes):
            episode = sample_episode(index, classes, cfg.n_way, cfg.k_shot,
                                     cfg.episode_mode, rng)
            with torch.no_grad():
                pred_mask, gt = predict_episode(model, index, episode, cfg.input_size)
            for state in states.values():
                accumulate(state, pred_mask, gt, episode.classes)
        for p, state in states.items():
            _, mean = score(state)
            run_means[p].append(mean)
            merged[p] = merged[p].merge(state)

    for p in merged:
        per_class, _ = score(merged[p])
        mean, stddev = aggregate_runs(run_means[p])
        protocols[p] = {
            "run_means": run_means[p],
            "mean": mean,
            "stddev": stddev,
            "per_class": {str(cid): iou for cid, iou in sorted(per_class.items())},
        }
    return {
        "fold": cfg.fold,
        "side": side,
        "n_way": cfg.n_way,
        "k_shot": cfg.k_shot,
        "episodes": episodes,
        "runs": runs,
        "seed": cfg.seed,
        "protocols": protocols,
    }


def format_report(report, protocol_filter="both"):
    """Human-readable per-fold report block."""
    lines = [
        f"fold {report['fold']} ({report['side']} split), "
        f"{report['n_way']}-way {report['k_shot']}-shot, "
        f"{report['episodes']} episodes x {report['runs']} runs, seed {report['seed']}"
    ]
    wanted = ("miou", "miou_star") if protocol_filter == "both" else (protocol_filter,)
    for p in wanted:
        block = report["protocols"][p]
        lines.append(f"  {p}: mean {block['mean']:.4f} +- {block['stddev']:.4f}")
        for cid, iou in block["per_class"].items():
            lines.append(f"    class {cid}: {iou:.4f}")
    return "\n".join(lines)


_OVERLAY = np.array([
    [0, 0, 0], [255, 64, 64], [64, 200, 64], [64, 96, 255], [240, 220, 60],
    [200, 80, 220], [80, 220, 220], [250, 150, 60], [150, 100, 60],
], dtype=np.uint8)


def _load_support_dir(support_dir):
    """Per-class support pairs from ``<dir>/<class>/<name>.png`` plus
    ``<name>_mask.png``; class subdirectories are taken in sorted order."""
    if not os.path.isdir(support_dir):
        raise DataError(f"support directory {support_dir} not found")
    class_dirs = sorted(d for d in os.listdir(support_dir)
                        if os.path.isdir(os.path.join(support_dir, d)))
    if not class_dirs:
        raise DataError(f"{support_dir} has no class subdirectories")
    supports = []
    for d in class_dirs:
        full = os.path.join(support_dir, d)
        pairs = []
        for fname in sorted(os.listdir(full)):
            stem, ext = os.path.splitext(fname)
            if stem.endswith("_mask") or ext.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            mask_path = os.path.join(full, stem + "_mask.png")
            if not os.path.exists(mask_path):
                raise DataError(f"no mask for support image {fname} in {full}")
            pairs.append((os.path.join(full, fname), mask_path))
        if not pairs:
            raise DataError(f"class directory {full} holds no image/mask pairs")
        supports.append(pairs)
    shots = min(len(p) for p in supports)
    return [pairs[:shots] for pairs in supports]


def predict(checkpoint_path, support_dir, query_path, out_path, overlay_path=None):
    """Segment one query image given on-disk support examples."""
    model, cfg = load_checkpoint(checkpoint_path)
    model.eval()
    supports = _load_support_dir(support_dir)
    if len(supports) != cfg.n_way:
        raise ConfigError(
            f"checkpoint expects {cfg.n_way} support classes, found {len(supports)}"
        )

    def load_img(path):
        try:
            return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise DataError(f"cannot read image {path}") from exc

    size = cfg.input_size
    sup_imgs, sup_masks = [], []
    for pairs in supports:
        imgs, masks = [], []
        for img_path, mask_path in pairs:
            img = load_img(img_path)
            mask = np.asarray(Image.open(mask_path), dtype=np.int32)
            if mask.ndim != 2:
                raise DataError(f"support mask {mask_path} is not single-channel")
            img, mask = resize_pair(img, (mask > 0).astype(np.int32), size)
            imgs.append(torch.from_numpy(normalize_image(img)).permute(2, 0, 1))
            masks.append(torch.from_numpy(mask.astype(np.float32)))
        sup_imgs.append(torch.stack(imgs))
        sup_masks.append(torch.stack(masks))

    query = load_img(query_path)
    qh, qw = query.shape[:2]
    q_resized, _ = resize_pair(query, np.zeros((qh, qw), dtype=np.int32), size)
    with torch.no_grad():
        pred = model.forward_episode(
            torch.stack(sup_imgs), torch.stack(sup_masks),
            torch.from_numpy(normalize_image(q_resized)).permute(2, 0, 1))
        probs = torch.nn.functional.interpolate(
            pred.probs.unsqueeze(0), size=(qh, qw), mode="bilinear",
            align_corners=False).squeeze(0)
    labels = probs.argmax(dim=0).cpu().numpy().astype(np.uint8)

    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    Image.fromarray(labels, mode="L").save(out_path)
    if overlay_path:
        colors = _OVERLAY[labels % len(_OVERLAY)]
        base = (query * 255).astype(np.uint8)
        blend = (0.55 * base + 0.45 * colors).astype(np.uint8)
        blend[labels == 0] = base[labels == 0]
        Image.fromarray(blend).save(overlay_path)
    return labels
