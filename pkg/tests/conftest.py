# tests/conftest.py
import pytest

from actiongraph.data import synth_generate
from actiongraph.schemas import ModelConfig, SynthSpec, TrainConfig

FEATURE_DIM = 16
HIDDEN_DIM = 8


@pytest.fixture(name="small_spec")
def small_spec_fixture():
    return SynthSpec(
        num_classes=3,
        videos_per_class=4,
        test_videos_per_class=2,
        segments_range=(12, 20),
        action_instances_range=(1, 2),
        action_length_range=(2, 4),
        feature_dim=FEATURE_DIM,
        noise_sigma=0.1,
        seed=7,
    )


@pytest.fixture(name="small_dataset")
def small_dataset_fixture(tmp_path, small_spec):
    """Synthetic train/test manifests with AGF1 files under tmp_path."""
    return synth_generate(small_spec, tmp_path / "synth")


@pytest.fixture(name="model_config")
def model_config_fixture():
    return ModelConfig(num_classes=3, feature_dim=FEATURE_DIM, hidden_dim=HIDDEN_DIM, seed=3)


@pytest.fixture(name="train_config")
def train_config_fixture(model_config):
    return TrainConfig(epochs=2, batch_size=4, learning_rate=0.01, checkpoint_every=1, seed=11, model=model_config)
