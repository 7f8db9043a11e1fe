"""Shared test plumbing: the acceptance-criterion result ledger.

test_acceptance.py records one line per criterion here; the hook prints them
as a summary block at the end of the run so the pass/fail verdicts are
visible in plain `pytest -v` output (per-test prints are swallowed by
capture unless a test fails).
"""

import pytest

_CRITERION_LINES: list = []


@pytest.fixture(scope="session")
def criterion_log():
    return _CRITERION_LINES


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_CRITERION_LINES):
            terminalreporter.write_line(line)
