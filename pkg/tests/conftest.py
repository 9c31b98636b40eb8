import pytest

from fedktl.numeric import precision


@pytest.fixture
def f64():
    with precision(64):
        yield


def pytest_terminal_summary(terminalreporter):
    import sys
    lines = []
    for mod in list(sys.modules.values()):
        lines.extend(getattr(mod, "ACCEPTANCE_RESULTS", []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
