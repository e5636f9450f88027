"""Collects ``@pytest.mark.criterion`` outcomes into a one-line-per-criterion summary."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    details = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    status = "PASS" if rep.passed else "FAIL"
    prev = _RESULTS.get(number)
    if prev is None or status == "FAIL":
        _RESULTS[number] = (title, status, details)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_RESULTS):
        title, status, details = _RESULTS[number]
        line = f"criterion {number:>2} {status}  {title}"
        if details:
            line += f"  [{details}]"
        terminalreporter.write_line(line)
