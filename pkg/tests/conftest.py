import pytest
import torch

import settings
from models import MicroMLLM
from schemas import DataConfig, ModelConfig, TrainConfig
from substrate.tensor_ops import Rng


TINY_MODEL = dict(
    n_layers=2,
    d_model=16,
    n_heads=2,
    vocab_size=32,
    visual_logit_dim=8,
    vision_head_hidden=16,
    patch_size=2,
    grid=(3, 3),
    channels=3,
)


def tiny_train_config(**overrides) -> TrainConfig:
    data = DataConfig(colors=4, noise_std=0.05, probe_count=4, probe_seed=77, images_per_pack=2, pad_to=20)
    base = dict(
        model=TINY_MODEL,
        data=data.model_dump(),
        steps=4,
        batch_size=4,
        seed=3,
        log_every=1,
        diag_every=2,
        cknna_k=3,
        mask={"kind": "constant", "target_ratio": 0.3},
        ema={"update_every": 2},
    )
    base.update(overrides)
    return TrainConfig.model_validate(base)


@pytest.fixture
def model_config() -> ModelConfig:
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_model(model_config) -> MicroMLLM:
    return MicroMLLM(model_config, Rng(11))


@pytest.fixture
def train_config() -> TrainConfig:
    return tiny_train_config()


@pytest.fixture
def rng() -> Rng:
    return Rng(1234)


@pytest.fixture(autouse=True)
def deterministic(monkeypatch):
    monkeypatch.setattr(settings, "DETERMINISTIC", True)
    torch.set_num_threads(1)


def pytest_collection_modifyitems(config, items):
    if settings.RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set LAVER_RUN_SLOW=1 to run training reproductions")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
