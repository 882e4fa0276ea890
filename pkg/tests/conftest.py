import numpy as np
import pytest

from glyforge import hovorka as hv
from glyforge.population import generate_population


@pytest.fixture(scope="session")
def population():
    return generate_population(0)


@pytest.fixture
def nominal():
    return hv.NOMINAL


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(n, ok, detail)``."""
    def record(number, ok, detail, extra=()):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        for i, text in enumerate([line] + ["    " + e for e in extra]):
            _ACCEPTANCE.append((number, i, text))
            print(text)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
