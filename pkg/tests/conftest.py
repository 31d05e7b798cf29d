"""Collects acceptance outcomes so a pass/fail line per criterion ends the run."""
from collections import defaultdict

import pytest

_OUTCOMES = defaultdict(list)
_TITLES = {}


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or report.outcome == "failed" or report.skipped:
        _OUTCOMES[crit].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        rep = outcome.get_result()
        rep.criterion = marker.args[0]
        _TITLES[marker.args[0]] = marker.args[1]


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_OUTCOMES):
        results = _OUTCOMES[crit]
        verdict = "PASS" if results and all(r == "passed" for r in results) else "FAIL"
        terminalreporter.write_line(f"criterion {crit:>2}: {verdict}  {_TITLES[crit]}")
