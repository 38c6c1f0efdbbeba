import numpy as np
import pytest

from varprune.data_pipeline import WindowedDataset
from varprune.nn_core import init_model, mlp_specs


def random_model(rng, widths, randomize_bias=True):
    """MLP with He weights and (optionally) nonzero biases; ``widths`` includes input and hidden sizes."""
    model = init_model(mlp_specs(widths[0], widths[1:]), int(rng.integers(2**31)))
    if randomize_bias:
        model.biases = [rng.normal(0, 0.3, b.shape) for b in model.biases]
    return model


def random_dataset(rng, n, d, n_groups=3):
    groups = np.array([f"g{k}" for k in rng.integers(0, n_groups, n)])
    return WindowedDataset(rng.uniform(0, 1, (n, d)), rng.uniform(0, 1, n), groups, [f"x{i}" for i in range(d)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
