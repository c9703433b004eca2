from __future__ import annotations

from pathlib import Path

import hypothesis
import numpy as np
import pytest

from arflow.flow import numcore
from arflow.flow.logger import configure_logging
from arflow.flow.model import ARFlowModel, ModelConfig
from arflow.flow.sequence import DatasetSpec, make_dataset

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)

configure_logging(console_only=True)

TINY_MODEL = ModelConfig(latent_shape=(2, 4, 4), patch_size=2, hidden_size=16, depth=2, num_heads=2, num_classes=3)
TINY_DATA = DatasetSpec(num_classes=3, items_per_class=8, latent_shape=(2, 4, 4), spread=0.3, seed=7)


@pytest.fixture
def float64():
    with numcore.float64_mode():
        yield


@pytest.fixture
def tiny_config() -> ModelConfig:
    return TINY_MODEL


@pytest.fixture
def tiny_dataset():
    return make_dataset(TINY_DATA)


def randomize(model: ARFlowModel, seed: int = 0, std: float = 0.2) -> ARFlowModel:
    """Overwrites every parameter with small Gaussian values so the zero-initialized paths carry signal."""
    rng = numcore.RngState(seed)
    for index, (_, tensor) in enumerate(sorted(model.params.items())):
        values, _ = numcore.gaussian_array(tensor.shape, rng.stream(index))
        tensor.data = (values * std).astype(tensor.data.dtype)
    return model


@pytest.fixture
def run_dir(tmp_path: Path) -> Path:
    out = tmp_path / "run"
    out.mkdir()
    return out
