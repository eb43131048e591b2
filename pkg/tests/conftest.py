import numpy as np
import pytest

from gated_res2net import tensor as T

ACCEPTANCE_RESULTS = []


def record_criterion(number, passed, detail):
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def f64():
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
