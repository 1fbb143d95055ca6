import sys

import numpy as np
import pytest

from marlprune.data import synth_blobs
from marlprune.pruning import Policy
from marlprune.rl_train import PretrainConfig, TrainConfig, pretrain
from marlprune.vit import ViTConfig, ViTModel


@pytest.fixture(scope="session")
def tiny_data():
    return synth_blobs(0, 192), synth_blobs(0, 64, start=192)


@pytest.fixture(scope="session")
def tiny_vit_state(tiny_data):
    """Weights of a default-config ViT after a couple of quick supervised epochs."""
    model = ViTModel(ViTConfig(), np.random.default_rng(0))
    pretrain(model, tiny_data[0], PretrainConfig(epochs=2, batch_size=32))
    return {k: v.copy() for k, v in model.state_dict().items()}


@pytest.fixture
def tiny_model(tiny_vit_state):
    m = ViTModel(ViTConfig())
    m.load_state_dict(tiny_vit_state)
    return m


@pytest.fixture
def tiny_policy():
    return Policy.create(32, "mappo", np.random.default_rng(1))


@pytest.fixture
def quick_config():
    return TrainConfig(epochs=2, batch_size=64, K=2, seed=3)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[num])
