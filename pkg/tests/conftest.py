import sys

import numpy as np
import pytest

from qrecon.experiments import make_case


@pytest.fixture(scope="session")
def case_a():
    return make_case("a")


@pytest.fixture(scope="session")
def case_b():
    return make_case("b")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def observed_orders(errors, sizes):
    e = np.asarray(errors, float)
    h = np.asarray(sizes, float)
    return np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:])


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(verdicts):
        terminalreporter.write_line(verdicts[k])
