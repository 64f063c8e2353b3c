import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""
    def _report(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {label}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
