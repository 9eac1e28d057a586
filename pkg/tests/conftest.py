import numpy as np
import pytest

from rwre.environment import EnvironmentLaw
from rwre.geometry import BoxSpec, Rotation, build_box


@pytest.fixture
def unit_box():
    return build_box(BoxSpec(Rotation.identity(2), 1, 1, 1))


@pytest.fixture
def pair_box():
    return build_box(BoxSpec(Rotation.identity(2), 1, 2, 1))


@pytest.fixture
def srw2():
    return EnvironmentLaw.simple_random_walk(2)


@pytest.fixture
def drift2():
    return EnvironmentLaw.deterministic_drift(2, 0.05)


def as_set(sites):
    return {tuple(int(v) for v in s) for s in np.asarray(sites)}


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record and print one pass/fail line, then assert."""
    def check(label, ok, detail=""):
        line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
