import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

_VERDICTS = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(number, passed, detail)``."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _VERDICTS.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(line)
