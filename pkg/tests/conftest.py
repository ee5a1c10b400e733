import numpy as np
import pytest

from leafgrad.tensor import get_tape, precision


@pytest.fixture(autouse=True)
def fresh_tape():
    get_tape().reset()
    yield
    get_tape().reset()


@pytest.fixture
def f64():
    """Run the test body with 64-bit default precision."""
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> "PASS ..." / "FAIL ..." line, filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
