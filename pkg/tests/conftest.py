import pytest

_LINES = {}


@pytest.fixture(scope="session")
def criterion_log():
    """``log(number, passed, detail)`` records one summary line per acceptance criterion."""

    def log(number: int, passed: bool, detail: str) -> None:
        _LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"

    return log


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_LINES):
        terminalreporter.write_line(_LINES[number])
