import pytest
from hypothesis import settings

from helpers import SMALL_FAMILIES
from taskadapt.episodes import TaskGenConfig
from taskadapt.tensor.random import make_rng

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return make_rng(1234, "test")


@pytest.fixture(scope="session")
def small_tasks():
    return TaskGenConfig(families=SMALL_FAMILIES)


@pytest.fixture(scope="session")
def small_families(small_tasks):
    return small_tasks.build()


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
