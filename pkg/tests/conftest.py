import numpy as np
import pytest

from genq.datasrc.synth import synth_dataset
from genq.harness.commands import train_model
from genq.harness.config import TrainConfig


@pytest.fixture(scope="session")
def cnn():
    """A tiny-CNN baseline good enough for filter and quantization behaviour."""
    return train_model("tiny-cnn", TrainConfig(per_class=300, epochs=4, lr=0.05), seed=11)


@pytest.fixture(scope="session")
def vit():
    return train_model("tiny-vit", TrainConfig(per_class=200, epochs=6, lr=0.05), seed=11)


@pytest.fixture(scope="session")
def test_data():
    return synth_dataset(30, 4242)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
