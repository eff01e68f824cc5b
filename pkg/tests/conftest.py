import numpy as np
import pytest
import torch

from privshield.data import SynthConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(SynthConfig(n_identities=6, samples_per_identity=20, k_attributes=4, seed=3))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def rng(seed=0):
    return np.random.default_rng(seed)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
