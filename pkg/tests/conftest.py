import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from solar_vlm.data import make_synthetic_dataset  # noqa: E402
from solar_vlm.model import ModelConfig  # noqa: E402
from solar_vlm.training import TrainConfig  # noqa: E402


def tiny_model_config(**overrides):
    cfg = dict(
        seq_len=48,
        patch_len=8,
        patch_stride=8,
        d_model=16,
        num_heads=2,
        memory_size=10,
        memory_top_k=2,
        d_text=16,
        d_v=8,
        num_images=2,
        knn_k=2,
    )
    cfg.update(overrides)
    return ModelConfig(**cfg)


def tiny_train_config(**overrides):
    cfg = dict(epochs=1, batch_size=16, window_stride=16, horizon=8, learning_rate=1e-3)
    cfg.update(overrides)
    return TrainConfig(**cfg)


@pytest.fixture(scope="session")
def small_dataset():
    return make_synthetic_dataset(3, 8, seed=1)


@pytest.fixture
def model_cfg():
    return tiny_model_config()


@pytest.fixture
def train_cfg():
    return tiny_train_config()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[number])
