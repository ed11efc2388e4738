"""Prints one PASS/FAIL line per acceptance criterion after the run."""

import re

_results = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if m:
        _results[int(m.group(1))] = (report.outcome, report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_results):
        outcome, nodeid = _results[num]
        status = "PASS" if outcome == "passed" else "FAIL"
        name = nodeid.split("::")[-1].replace(f"test_criterion_{num:02d}_", "")
        terminalreporter.write_line(f"criterion {num:2d} [{status}] {name}")
