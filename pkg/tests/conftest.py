import numpy as np
import pytest
import torch

from fewseg.config import TrainConfig
from fewseg.episodes import build_index, load_fold_spec
from fewseg.synthetic import SynthSpec, synth_shapes


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = SynthSpec(num_classes=6, images_per_class=8, image_size=64,
                     cooccur_fraction=0.7, num_folds=3)
    synth_shapes(spec, np.random.default_rng(11), str(root))
    return str(root)


@pytest.fixture(scope="session")
def synth_index(synth_root):
    return build_index(synth_root)


@pytest.fixture(scope="session")
def synth_fold(synth_root):
    return load_fold_spec(synth_root, 0, 3)


@pytest.fixture()
def tiny_cfg(synth_root, tmp_path):
    """Small but complete config pointing at the shared synthetic dataset."""
    return TrainConfig(
        dataset="synthetic",
        data_root=synth_root,
        num_folds=3,
        input_size=64,
        augment=False,
        n_way=2,
        k_shot=1,
        episodes_per_epoch=2,
        backbone="tiny_random",
        channels=16,
        z_scales=2,
        relation_groups=4,
        pml_start_epoch=0,
        lr=0.05,
        epochs=2,
        batch_size=1,
        threads=1,
        out_dir=str(tmp_path / "run"),
    ).validate()


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
