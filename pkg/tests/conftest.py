import pytest
import torch

from luminet.config import (
    ConditioningConfig,
    DatagenConfig,
    DiffusionConfig,
    IntrinsicsConfig,
    RunConfig,
    TrainConfig,
)
from luminet.services.datagen import build_paired_dataset
from luminet.services.diffusion import LuminetModels
from luminet.services.intrinsics import IntrinsicsModel

TINY_SIZE = 16


def tiny_config(**diffusion) -> RunConfig:
    return RunConfig(
        intrinsics=IntrinsicsConfig(image_size=TINY_SIZE, c_int=8, d_light=4, base_channels=8),
        conditioning=ConditioningConfig(c_ctrl=16, n_tok=2, d_emb=16, adaptor_widths=[16, 32, 32, 32, 32]),
        diffusion=DiffusionConfig(T=100, channels=[8, 16, 16], heads=2, sample_steps=5, **diffusion),
        train_intrinsics=TrainConfig(steps=20, batch_size=4, lr=1e-3, checkpoint_every=0),
        train_luminet=TrainConfig(steps=10, batch_size=4, lr=1e-3, checkpoint_every=0),
        datagen=DatagenConfig(n_scenes=4, k_lights=5, image_size=TINY_SIZE),
    )


@pytest.fixture
def config() -> RunConfig:
    return tiny_config()


@pytest.fixture
def models(config) -> LuminetModels:
    torch.manual_seed(0)
    return LuminetModels.build(config, intrinsics=IntrinsicsModel(config.intrinsics), seed=0)


@pytest.fixture
def random_image():
    def make(size: int = TINY_SIZE, seed: int = 0) -> torch.Tensor:
        return torch.rand(size, size, 3, generator=torch.Generator().manual_seed(seed))

    return make


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """4 tiny toy scenes under 5 lightings each"""
    out_dir = tmp_path_factory.mktemp("toy")
    return build_paired_dataset(4, 5, seed=0, out_dir=out_dir, cfg=DatagenConfig(image_size=TINY_SIZE))


@pytest.fixture
def home(tmp_path, monkeypatch):
    monkeypatch.setenv("LUMINET_HOME", str(tmp_path / "home"))
    return tmp_path / "home"
