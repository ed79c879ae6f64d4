import pytest

_ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def acceptance_line():
    """Record ``(criterion, passed, detail)``; the lines are printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str):
        _ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(_ACCEPTANCE_LINES[number])
