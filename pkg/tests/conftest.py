import numpy as np
import pytest

from viscos import Flow, TrainConfig, gen_dataset, mle_train


def train_flow(kind, n, d=None, epochs=2, n_layers=4, width=32, seed=0, params=None):
    """Short maximum-likelihood run from a near-identity start."""
    ds = gen_dataset(kind, n, d, seed=seed, params=params)
    flow = Flow.random(ds.dim, n_layers=n_layers, width=width, seed=seed, weight_scale=0.1, bias_scale=0.1)
    flow, _ = mle_train(flow, ds, TrainConfig(epochs=epochs, seed=seed))
    return flow


@pytest.fixture(scope="session")
def moons_flow():
    return train_flow("two_moons", 2000, epochs=3)


@pytest.fixture(scope="session")
def flow4():
    return train_flow("gauss_mixture", 1000, 4)


@pytest.fixture(scope="session")
def flow6():
    return train_flow("gauss_mixture", 1000, 6)


@pytest.fixture(scope="session")
def flow8():
    return train_flow("correlated_gauss", 1000, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one verdict line per acceptance criterion, printed after the run
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)
