import numpy as np
import pytest
from hypothesis import settings

from cotbma.families import decay_pair, skewed_pair, symmetric_pair

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def sym():
    return symmetric_pair()


@pytest.fixture
def skewed():
    return skewed_pair()


@pytest.fixture
def decay():
    return decay_pair()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion and return the verdict."""

    def record(num: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
