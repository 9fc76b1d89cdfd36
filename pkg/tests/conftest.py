"""Collects acceptance results and prints one line per criterion."""

from collections import OrderedDict

import pytest

_RESULTS = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    return (mark.args[0], mark.args[1]) if mark else None


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    key = _criterion(item)
    if key is None:
        return
    ok = _RESULTS.get(key, True)
    if report.when == "call" or report.failed:
        ok = ok and report.passed
    _RESULTS[key] = ok


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), ok in sorted(_RESULTS.items()):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}")
