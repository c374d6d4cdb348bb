import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion number -> (title, [outcomes], [details])
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, (title, [], []))
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry[1].append("passed" if rep.passed else rep.outcome)
        if rep.when == "call":
            entry[2].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcomes, details = _CRITERIA[n]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIPPED"
        else:
            status = "FAIL"
        line = f"criterion {n:2d} {status:7s} {title}"
        if details:
            line += " | " + "; ".join(details)
        tr.write_line(line)
