"""Shared fixtures; collects the acceptance verdicts for the terminal summary."""
import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(label, passed, detail):
        line = f"{label}: {'PASS' if passed else 'FAIL'} ({detail})"
        _VERDICTS.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
