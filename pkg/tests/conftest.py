"""Collects acceptance outcomes and prints one line per criterion at the end."""

import pytest

_results: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # a failed fixture counts as a failed criterion; a passed setup says nothing yet
    if report.when == "call" or (report.when == "setup" and not report.passed):
        number, title = marker.args
        _results[number] = ("PASS" if report.passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, title = _results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
