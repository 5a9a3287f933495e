import numpy as np
import pytest

from divpatch.vit import ModelConfig, init_params

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(image_size=8, patch_size=4, channels=1, dim=16, depth=2, heads=2, num_classes=3)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=7)
