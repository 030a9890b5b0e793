"""Collects the one-line acceptance verdicts and prints them after the run."""

import pytest

VERDICTS: list = []


@pytest.fixture
def verdict():
    def record(criterion: int, passed: bool, detail: str) -> None:
        VERDICTS.append(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
        print(VERDICTS[-1])
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
