import numpy as np
import pytest

from advmed.classifier import Architecture, TrainConfig, init_model, train
from advmed.data import generate_synthetic, split_by_patient

SMALL_ARCH = Architecture(input_spec=(1, 8, 8), conv_channels=(2, 3), hidden=4)


@pytest.fixture(scope="session")
def small_data():
    ds = generate_synthetic(40, 4, seed=3)
    return split_by_patient(ds, 0.25, seed=3)


@pytest.fixture(scope="session")
def trained_model(small_data):
    """Default architecture, a few epochs: enough signal for attack tests."""
    tr, _ = small_data
    return train(tr, TrainConfig(epochs=8, seed=5))


@pytest.fixture
def tiny_model():
    return init_model(SMALL_ARCH, seed=11)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", "call") != "call":
                continue
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
