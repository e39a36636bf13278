"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""
from collections import OrderedDict

import pytest

_outcomes = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    entry = _outcomes.setdefault(crit[0], {"title": crit[1], "cases": []})
    entry["cases"].append((report.nodeid.split("::")[-1], report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_outcomes):
        entry = _outcomes[number]
        cases = entry["cases"]
        ok = all(o == "passed" for _, o in cases)
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number}: {entry['title']}"
                      f"  ({sum(o == 'passed' for _, o in cases)}/{len(cases)} cases)")
        if not ok:
            for name, o in cases:
                if o != "passed":
                    tr.write_line(f"        {o}: {name}")
