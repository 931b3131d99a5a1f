import numpy as np
import pytest

from edgecdn.model import ClassSpec, SystemParams, class_catalog, zipf_catalog

CLASS_MODEL = ClassSpec(sizes=(200, 400, 400), rates=(9.0, 3.0, 1.0), replicas=(200, 67, 23))


@pytest.fixture(scope="session")
def zipf08():
    cat = zipf_catalog(200, 0.8, 9.0)
    return cat, SystemParams.from_catalog(cat, 2000, 10)


@pytest.fixture(scope="session")
def zipf12():
    cat = zipf_catalog(200, 1.2, 9.0)
    return cat, SystemParams.from_catalog(cat, 2000, 10)


@pytest.fixture(scope="session")
def class_model():
    """Class instance with rates rescaled to load exactly 0.9 on 3800 servers."""
    cat = class_catalog(CLASS_MODEL, 0.9 * 3800 / 3400)
    return cat, SystemParams.from_catalog(cat, 3800, 20), CLASS_MODEL


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
