import numpy as np
import pytest

from flowrecover.benchmarks import default_spec, generate, lotka_volterra_model


@pytest.fixture(scope="session")
def lv_data():
    return generate(default_spec("lotka_volterra"))


@pytest.fixture(scope="session")
def lv_truth():
    return lotka_volterra_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
