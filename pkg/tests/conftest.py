import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

DATA = os.path.join(os.path.dirname(__file__), "data")

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one acceptance verdict line; the summary prints all of them."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number, title, status, detail=""):
        line = f"[{status}] criterion {number}: {title}" + (f" -- {detail}" if detail else "")
        lines.append((number, line))
        print(line)
        return status == "PASS"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_csv():
    return os.path.join(DATA, "toy.csv")


@pytest.fixture
def toy_schema():
    return os.path.join(DATA, "toy_schema.json")
