import dataclasses
import json
import os

import numpy as np
import pytest
import torch

from fewseg.augment import augment_pair, resize_pair
from fewseg.checkpoint import load_checkpoint
from fewseg.errors import NumericalAbort
from fewseg.train import (EpisodeStream, evaluate, materialize_episode,
                          nearest_labels, parameter_digest, poly_lr,
                          prepare_dataset, train)


class TestPolySchedule:
    def test_initial_rate_is_base(self):
        assert poly_lr(0.0025, 0, 1000, 0.9) == 0.0025

    def test_final_rate_is_zero(self):
        assert poly_lr(0.0025, 1000, 1000, 0.9) == 0.0

    def test_strictly_decreasing(self):
        values = [poly_lr(0.1, it, 500, 0.9) for it in range(0, 501, 10)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestNearestLabels:
    def test_identity_at_same_size(self):
        mask = np.arange(16).reshape(4, 4)
        assert np.array_equal(nearest_labels(mask, (4, 4)), mask)

    def test_center_sampling(self):
        mask = np.zeros((8, 8), dtype=int)
        mask[0:4, 0:4] = 1
        out = nearest_labels(mask, (2, 2))
        assert out.tolist() == [[1, 0], [0, 0]]


class TestAugment:
    def test_shapes_preserved(self):
        rng = np.random.default_rng(0)
        img = rng.random((80, 70, 3)).astype(np.float32)
        mask = rng.integers(0, 3, size=(80, 70))
        out_img, out_mask = augment_pair(img, mask, 64, rng)
        assert out_img.shape == (64, 64, 3)
        assert out_mask.shape == (64, 64)

    def test_labels_remain_valid(self):
        rng = np.random.default_rng(1)
        img = rng.random((64, 64, 3)).astype(np.float32)
        mask = rng.integers(0, 4, size=(64, 64))
        for _ in range(10):
            _, out_mask = augment_pair(img, mask, 64, rng)
            assert set(np.unique(out_mask)) <= set(np.unique(mask)) | {0}

    def test_deterministic_given_seed(self):
        img = np.random.default_rng(2).random((64, 64, 3)).astype(np.float32)
        mask = (img[..., 0] > 0.5).astype(np.int32)
        a = augment_pair(img, mask, 64, np.random.default_rng(9))
        b = augment_pair(img, mask, 64, np.random.default_rng(9))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_resize_pair_nearest_mask(self):
        img = np.zeros((8, 8, 3), dtype=np.float32)
        mask = np.zeros((8, 8), dtype=np.int32)
        mask[:4] = 2
        out_img, out_mask = resize_pair(img, mask, 4)
        assert out_img.shape == (4, 4, 3)
        assert set(np.unique(out_mask)) == {0, 2}


class TestEpisodeStream:
    def test_pool_cycles_deterministically(self, synth_index, synth_fold, tiny_cfg):
        cfg = dataclasses.replace(tiny_cfg, episode_pool=3)
        stream = EpisodeStream(synth_index, synth_fold.train_classes, cfg,
                               np.random.default_rng(0))
        first = [next(stream) for _ in range(3)]
        second = [next(stream) for _ in range(3)]
        assert first == second

    def test_fresh_stream_draws_new_episodes(self, synth_index, synth_fold, tiny_cfg):
        stream = EpisodeStream(synth_index, synth_fold.train_classes, tiny_cfg,
                               np.random.default_rng(0))
        eps = [next(stream) for _ in range(6)]
        assert len(set(eps)) > 1


class TestTraining:
    def test_short_run_writes_log_and_checkpoint(self, tiny_cfg):
        result = train(tiny_cfg)
        assert os.path.exists(result.checkpoint_path)
        assert os.path.exists(result.log_path)
        records = [json.loads(l) for l in open(result.log_path) if l.strip()]
        assert len(records) == len(result.history) == 4
        for rec in records:
            assert set(rec) >= {"iter", "lr", "loss_seg", "loss_pml", "triplets"}
        lrs = [r["lr"] for r in records]
        assert lrs[0] == tiny_cfg.lr
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_materialize_shapes(self, synth_index, synth_fold, tiny_cfg):
        from fewseg.episodes import sample_episode

        ep = sample_episode(synth_index, synth_fold.train_classes, 2, 2, "any",
                            np.random.default_rng(0))
        tensors = materialize_episode(synth_index, ep, 64)
        assert tensors.support_images.shape == (2, 2, 3, 64, 64)
        assert tensors.support_masks.shape == (2, 2, 64, 64)
        assert tensors.query_image.shape == (3, 64, 64)
        assert tensors.query_gt.shape == (64, 64)
        assert set(np.unique(tensors.query_gt)) <= {0, 1, 2}
        # every support mask kept at least one foreground pixel
        assert (tensors.support_masks.sum(dim=(2, 3)) > 0).all()

    def test_numerical_abort_dumps_episode(self, tiny_cfg, monkeypatch):
        import fewseg.train as T

        def poisoned(model, cfg, tensors, epoch, pml_rng):
            pred, seg, pml, n = original(model, cfg, tensors, epoch, pml_rng)
            return pred, seg * float("nan"), pml, n

        original = T.episode_losses
        monkeypatch.setattr(T, "episode_losses", poisoned)
        with pytest.raises(NumericalAbort) as err:
            T.train(tiny_cfg)
        assert "iteration 0" in str(err.value)
        assert os.path.exists(os.path.join(tiny_cfg.out_dir, "abort_episodes.jsonl"))


@pytest.fixture(scope="module")
def trained(tmp_path_factory, synth_root):
    from fewseg.config import TrainConfig

    cfg = TrainConfig(
        dataset="synthetic", data_root=synth_root, num_folds=3,
        input_size=64, augment=False, n_way=2, k_shot=1,
        episodes_per_epoch=4, backbone="tiny_random", channels=16,
        z_scales=2, relation_groups=4, pml_start_epoch=0, lr=0.05,
        epochs=2, batch_size=1, threads=1,
        out_dir=str(tmp_path_factory.mktemp("trained")),
    ).validate()
    torch.manual_seed(cfg.seed)
    result = train(cfg)
    return cfg, result.checkpoint_path


class TestEvaluate:
    def test_report_structure_and_protocol_order(self, trained):
        cfg, ckpt = trained
        report = evaluate(cfg, ckpt, episodes=6, runs=2)
        assert set(report["protocols"]) == {"miou", "miou_star"}
        for block in report["protocols"].values():
            assert len(block["run_means"]) == 2
            assert 0.0 <= block["mean"] <= 1.0
        assert (report["protocols"]["miou_star"]["mean"]
                <= report["protocols"]["miou"]["mean"] + 1e-12)

    def test_seeded_replay_is_deterministic(self, trained):
        cfg, ckpt = trained
        a = evaluate(cfg, ckpt, episodes=4, runs=2)
        b = evaluate(cfg, ckpt, episodes=4, runs=2)
        assert a == b

    def test_evaluation_leaves_parameters_unchanged(self, trained):
        cfg, ckpt = trained
        model, _ = load_checkpoint(ckpt)
        before = parameter_digest(model)
        evaluate(cfg, ckpt, episodes=4, runs=1)
        model_again, _ = load_checkpoint(ckpt)
        assert parameter_digest(model_again) == before


def test_prepare_dataset_generates_synthetic_once(tiny_cfg, tmp_path):
    cfg = dataclasses.replace(tiny_cfg, data_root=str(tmp_path / "fresh"),
                              num_folds=2, synth_classes=4, synth_images_per_class=4)
    index_a, fold = prepare_dataset(cfg)
    stamp = sorted(os.listdir(os.path.join(cfg.data_root, "images")))
    index_b, _ = prepare_dataset(cfg)
    assert sorted(os.listdir(os.path.join(cfg.data_root, "images"))) == stamp
    assert index_a.by_class == index_b.by_class
    assert set(fold.train_classes) | set(fold.test_classes) == {1, 2, 3, 4}
