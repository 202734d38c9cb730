import numpy as np
import pytest

from capacc.core import PrecisionModel
from capacc.graph import banded_adjacency

# Lines recorded by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_banded_precision(rng, p, r, fill=1.0, strength=0.4):
    """Random positive definite precision with bandwidth at most ``r``.

    ``fill`` is the probability that a within-band entry is nonzero.
    """
    W = banded_adjacency(p, r) if p > 1 else np.zeros((1, 1), dtype=bool)
    mask = np.triu(W & (rng.random((p, p)) < fill), 1)
    mask = mask | mask.T
    Q = np.where(mask, rng.uniform(-strength, strength, (p, p)), 0.0)
    Q = (Q + Q.T) / 2
    np.fill_diagonal(Q, 1.0 + np.abs(Q).sum(axis=1))
    return PrecisionModel(mu0=np.zeros(p), Q=Q)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
