from pathlib import Path

import pytest
import torch

from promptgad.config import RunConfig
from promptgad.data import SyntheticConfig, generate_synthetic, save_dataset

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def synthetic():
    """The default 64-clip dataset, generated once per session."""
    return generate_synthetic(SyntheticConfig())


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, synthetic):
    root = tmp_path_factory.mktemp("dataset")
    clips, frames = synthetic
    save_dataset(root, clips, frames)
    return root


@pytest.fixture(scope="session")
def small_data():
    """Eight small clips for fast training tests."""
    cfg = SyntheticConfig(num_clips=8, actors_min=3, actors_max=6, groups_max=2, frame_count=6, image_size=16, seed=3)
    return generate_synthetic(cfg)


@pytest.fixture
def small_cfg(tmp_path):
    return RunConfig(
        data_dir=str(tmp_path / "data"), out_dir=str(tmp_path / "run"), image_size=16, patch_size=4, layers=2,
        model_dim=16, heads=2, ffn_mult=2, prompt_count=3, frames=3, epochs=3, batch_size=4, lr=2e-3,
        train_split="all",
    )


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(1234)
