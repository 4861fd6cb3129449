import numpy as np
import pytest
import torch

from promptts import numerics as nx
from promptts.episodes.pool import generate_pool
from promptts.numerics import Rng

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def float64_mode():
    with nx.precision("test"):
        yield


@pytest.fixture(scope="session")
def small_pool():
    return generate_pool(Rng(2024).child("pool"), 6, 1024)


@pytest.fixture
def rng():
    return Rng(7)


def assert_close(a, b, tol):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    assert a.shape == b.shape, (a.shape, b.shape)
    assert np.max(np.abs(a - b), initial=0.0) <= tol


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
