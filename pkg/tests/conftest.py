import pytest

_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line; the lines are repeated in the terminal summary."""
    def report(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        _LINES.append(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
