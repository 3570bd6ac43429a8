import json
from pathlib import Path

import numpy as np
import pytest

from gradlab.nn import Network, he_init
from gradlab.tensor import make_rng

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixture_net():
    spec = json.loads((FIXTURES / "net_2_2_2.json").read_text())
    net = Network(tuple(np.array(w) for w in spec["weights"]),
                  tuple(np.array(b) for b in spec["biases"]))
    return net, spec


@pytest.fixture
def small_net():
    return he_init([2, 8, 4], make_rng(1, "small"))


@pytest.fixture
def mnist_net():
    return he_init([784, 64, 32, 10], make_rng(2, "mnist"))


@pytest.fixture
def rng():
    return make_rng(1234, "tests")


_ACCEPTANCE = []


@pytest.fixture
def acceptance_log():
    """Collects one pass/fail line per acceptance criterion."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
