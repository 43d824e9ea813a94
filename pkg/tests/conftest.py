import pytest

_criteria: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, summary): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, summary = marker.args
    failed = report.failed
    if report.when == "call" or failed or report.skipped:
        previous = _criteria.get(number)
        if previous and previous[0] == "FAIL":
            return
        status = "FAIL" if failed else ("SKIP" if report.skipped else "PASS")
        _criteria[number] = (status, summary, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, summary, duration = _criteria[number]
        terminalreporter.write_line(f"{status} criterion {number}: {summary} ({duration:.2f}s)")
