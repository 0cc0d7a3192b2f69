import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one acceptance line; printed in the terminal summary."""
    def record(number, title, passed, detail):
        status = "PASS" if passed else "FAIL"
        _ACCEPTANCE_LINES.append((number, f"[{status}] criterion {number:>2}: {title} ({detail})"))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
