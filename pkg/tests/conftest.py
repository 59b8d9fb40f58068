import numpy as np
import pytest

from haca.tensor import set_debug

_criteria = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_criteria] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_criteria, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _finite_checks():
    old = set_debug(True)
    yield
    set_debug(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line; returns the verdict so the test can assert it."""
    lines = request.config.stash[_criteria]

    def report(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return report
