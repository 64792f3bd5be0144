import os

import hypothesis
import pytest
import torch

from socialmae.data import generate_synthetic
from socialmae.runconfig import build_run_config
from socialmae.types import AudioFrontendConfig, LabelKind, SyntheticSpec

hypothesis.settings.register_profile("dev", deadline=None, max_examples=25)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=5)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "dev"))

DESK_FRONTEND = AudioFrontendConfig(n_mels=32, target_frames=64)


def make_dataset(path, n_clips=8, num_classes=4, seed=0, **spec):
    """A desk-scale synthetic dataset; stats are computed over 32 mel bins."""
    generate_synthetic(SyntheticSpec(num_classes=num_classes, seed=seed, **spec), n_clips, path, DESK_FRONTEND)
    return path


@pytest.fixture
def desk_cfg():
    return build_run_config(presets=["pretrain-default"], desk_scale=True)


@pytest.fixture
def generator():
    g = torch.Generator()
    g.manual_seed(0)
    return g


@pytest.fixture
def synthetic_dir(tmp_path):
    return make_dataset(tmp_path / "synth")


@pytest.fixture
def traits_dir(tmp_path):
    return make_dataset(tmp_path / "traits", label_kind=LabelKind.traits)


@pytest.fixture
def dataset_factory(tmp_path):
    def factory(name="synth", **kwargs):
        return make_dataset(tmp_path / name, **kwargs)

    return factory


@pytest.fixture(scope="session")
def shared_dataset(tmp_path_factory):
    """Read-only: 8 clips over 4 classes, shared by the slower tests."""
    return make_dataset(tmp_path_factory.mktemp("shared") / "synth")


@pytest.fixture(scope="session")
def pretrained_checkpoint(tmp_path_factory, shared_dataset):
    """Read-only: a two-epoch desk-scale pre-training run over `shared_dataset`."""
    from socialmae.data import Manifest, load_audio_stats
    from socialmae.training import pretrain

    out = tmp_path_factory.mktemp("pretrained")
    cfg = build_run_config(
        presets=["pretrain-default"],
        desk_scale=True,
        assignments=["pretrain.epochs=2", "pretrain.checkpoint_every=1"],
        audio_stats=load_audio_stats(shared_dataset),
        output_dir=str(out),
    )
    checkpoint, _ = pretrain(cfg, Manifest.load(shared_dataset))
    return checkpoint
