"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_RESULTS = {}


class CriterionLog:
    def record(self, number, title, ok, detail=""):
        _RESULTS[number] = (title, bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} {detail}".rstrip())
        assert ok, f"criterion {number} failed: {title} {detail}"


@pytest.fixture
def criterion():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 11):
        title, ok, detail = _RESULTS.get(number, ("", False, "(no result recorded)"))
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} {detail}".rstrip())
