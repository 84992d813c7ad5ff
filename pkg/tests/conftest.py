import numpy as np
import pytest

from dagfl.crypto import Keyring
from dagfl.dataset import Dataset, load_digits_dataset, split_train_test
from dagfl.model import Architecture, TrainingSettings

# acceptance results collected here and echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def digits():
    return load_digits_dataset()


@pytest.fixture(scope="session")
def digits_split(digits):
    return split_train_test(digits, 0.7, 0)


@pytest.fixture(scope="session")
def keyring():
    return Keyring(7, 12)


@pytest.fixture
def tiny():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 6))
    y = (X[:, 0] + X[:, 1] > 0).astype(int) + 2 * (X[:, 2] > 0.5).astype(int)
    return Dataset(X, y, 4)


@pytest.fixture
def tiny_arch():
    return Architecture.mlp(6, 4, (8,))


@pytest.fixture
def fast_settings():
    return TrainingSettings(epochs=2, lr=0.1, batch_size=10, seed=5)
