import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


def pytest_runtest_logreport(report):
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    n, title = marks
    entry = _CRITERIA.setdefault(n, {"title": title, "passed": 0, "failed": 0, "xfailed": 0, "skipped": 0})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if hasattr(report, "wasxfail"):
            entry["xfailed"] += 1
        else:
            entry[report.outcome] += 1


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        # an expected failure still means the criterion itself is not met
        if e["failed"] or e["xfailed"]:
            status = "FAIL"
        else:
            status = "SKIP" if e["skipped"] else "PASS"
        note = "  (unattainable part marked xfail, see decision log)" if e["xfailed"] else ""
        terminalreporter.write_line(f"criterion {n}: {status}  {e['title']}{note}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
