import json
import os

import numpy as np
import pytest
from PIL import Image

from fewseg.cli import main


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory, synth_root):
    """A config file, a trained checkpoint, and paths shared by CLI tests."""
    work = tmp_path_factory.mktemp("cli")
    cfg_path = work / "desk.cfg"
    cfg_path.write_text(
        "dataset = synthetic\n"
        f"data_root = {synth_root}\n"
        "num_folds = 3\n"
        "input_size = 64\n"
        "augment = false\n"
        "n_way = 2\n"
        "k_shot = 1\n"
        "episodes_per_epoch = 4\n"
        "backbone = tiny_random\n"
        "channels = 16\n"
        "z_scales = 2\n"
        "relation_groups = 4\n"
        "pml_start_epoch = 0\n"
        "lr = 0.05\n"
        "epochs = 2\n"
        "batch_size = 1\n"
        "threads = 1\n"
        f"out_dir = {work / 'run'}\n"
    )
    code = main(["train", "--config", str(cfg_path)])
    assert code == 0
    ckpt = work / "run" / "model.fsegckpt"
    assert ckpt.exists()
    return {"work": work, "config": str(cfg_path), "checkpoint": str(ckpt),
            "log": str(work / "run" / "train_log.jsonl")}


def test_eval_writes_summary(cli_workspace, capsys):
    out = str(cli_workspace["work"] / "summary.json")
    code = main(["eval", "--config", cli_workspace["config"],
                 "--checkpoint", cli_workspace["checkpoint"],
                 "--episodes", "4", "--runs", "2", "--protocol", "both",
                 "--out", out])
    assert code == 0
    printed = capsys.readouterr().out
    assert "miou_star" in printed
    summary = json.load(open(out))
    assert set(summary["protocols"]) == {"miou", "miou_star"}


def test_report_emits_plot(cli_workspace):
    plot = str(cli_workspace["work"] / "curves.png")
    code = main(["report", "--log", cli_workspace["log"], "--plot", plot])
    assert code == 0
    assert os.path.getsize(plot) > 0


class TestPredict:
    @pytest.fixture()
    def support_dir(self, cli_workspace, synth_index, synth_fold):
        """Self-support smoke setup: the query image is its own support."""
        from fewseg.episodes import sample_episode

        ep = sample_episode(synth_index, synth_fold.train_classes, 2, 1, "all",
                            np.random.default_rng(3))
        query_name = ep.query
        sup_root = cli_workspace["work"] / f"support_{query_name}"
        raw_mask = synth_index.load_mask(query_name)
        img_path = synth_index.image_paths[query_name]
        for local, cid in enumerate(ep.classes, start=1):
            cdir = sup_root / f"class{local}"
            cdir.mkdir(parents=True, exist_ok=True)
            Image.open(img_path).save(cdir / "shot.png")
            binary = ((raw_mask == cid) * 255).astype(np.uint8)
            Image.fromarray(binary, mode="L").save(cdir / "shot_mask.png")
        return str(sup_root), img_path, ep

    def test_self_support_smoke(self, cli_workspace, support_dir, synth_index):
        sup_root, query_path, ep = support_dir
        out = str(cli_workspace["work"] / "pred.png")
        overlay = str(cli_workspace["work"] / "pred_overlay.png")
        code = main(["predict", "--checkpoint", cli_workspace["checkpoint"],
                     "--support", sup_root, "--query", query_path,
                     "--out", out, "--overlay", overlay])
        assert code == 0
        pred = np.asarray(Image.open(out))
        query = np.asarray(Image.open(query_path))
        assert pred.shape == query.shape[:2]
        assert os.path.getsize(overlay) > 0

        code = main(["predict", "--checkpoint", cli_workspace["checkpoint"],
                     "--support", sup_root, "--query", query_path,
                     "--out", str(cli_workspace["work"] / "pred2.png")])
        assert code == 0
        again = np.asarray(Image.open(cli_workspace["work"] / "pred2.png"))
        assert np.array_equal(pred, again)

    def test_missing_query_is_data_error(self, cli_workspace, support_dir):
        sup_root, _, _ = support_dir
        code = main(["predict", "--checkpoint", cli_workspace["checkpoint"],
                     "--support", sup_root, "--query", "/nonexistent.png",
                     "--out", str(cli_workspace["work"] / "x.png")])
        assert code == 3


class TestExitCodes:
    def test_unknown_config_key_is_config_error(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("warp_speed = 9\n")
        assert main(["train", "--config", str(bad)]) == 2

    def test_bad_override_is_config_error(self, cli_workspace):
        assert main(["train", "--config", cli_workspace["config"],
                     "--override", "fusion_mode=Z+Z"]) == 2

    def test_missing_data_root_is_data_error(self, tmp_path):
        cfg = tmp_path / "missing.cfg"
        cfg.write_text("dataset = layout\ndata_root = /does/not/exist\n"
                       "backbone = tiny_random\nchannels = 16\nepochs = 1\n"
                       "episodes_per_epoch = 1\nbatch_size = 1\n")
        assert main(["train", "--config", str(cfg)]) == 3

    def test_numerical_abort_exit_code(self, cli_workspace, monkeypatch):
        import fewseg.train as T

        def explode(*args, **kwargs):
            raise T.NumericalAbort("synthetic failure")

        monkeypatch.setattr(T, "train", explode)
        assert main(["train", "--config", cli_workspace["config"]]) == 4

    def test_checkpoint_config_mismatch_is_config_error(self, cli_workspace):
        assert main(["eval", "--config", cli_workspace["config"],
                     "--override", "n_way=3",
                     "--checkpoint", cli_workspace["checkpoint"],
                     "--episodes", "1", "--runs", "1"]) == 2
