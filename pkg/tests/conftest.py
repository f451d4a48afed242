import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

_CRITERIA = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def criterion_log(pytestconfig):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return pytestconfig.stash.setdefault(_CRITERIA, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
