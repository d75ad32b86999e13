import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def report_line():
    """Record one summary line; all lines are echoed at the end of the run."""

    def add(line: str) -> None:
        _LINES.append(line)
        print(line)

    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
