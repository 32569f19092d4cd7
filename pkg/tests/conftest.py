import pytest

from grounding.schemas import EncoderConfig, ModelConfig, RunConfig, TrainConfig
from grounding.synthetic import generate_synthetic_dataset, generate_synthetic_scene


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    cache = tmp_path / "cache"
    monkeypatch.setenv("WEAKGROUND_CACHE_DIR", str(cache))
    return cache


@pytest.fixture(scope="session")
def synthetic_scene():
    return generate_synthetic_scene(seed=3, num_proposals=4, num_categories=8, num_frames=3)


@pytest.fixture(scope="session")
def synthetic_scenes():
    return generate_synthetic_dataset(seed=11, count=3, num_proposals=4, num_categories=8, num_frames=2)


@pytest.fixture
def tiny_config() -> RunConfig:
    return RunConfig(
        encoder=EncoderConfig(
            d=16,
            point_sample_count=32,
            point_backbone="mlp",
            transformer_layers=1,
            transformer_heads=2,
        ),
        model=ModelConfig(adapter_hidden=16),
        train=TrainConfig(batch_size_scenes=2, base_lr=0.005, max_epochs=2, decay_epochs=[1]),
    )
